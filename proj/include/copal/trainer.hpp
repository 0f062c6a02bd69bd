// SPDX-License-Identifier: Apache-2.0
//
// Minimal SGD trainer producing base checkpoints from a uniform mixture of
// corpora. Gradients are clipped to a global L2 norm before each update.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "copal/corpus.hpp"
#include "copal/model.hpp"
#include "copal/rng.hpp"

namespace copal::trainer {

struct TrainConfig {
    std::size_t steps = 3000;
    std::size_t batch = 8;
    std::size_t seq_len = 128;
    double learning_rate = 0.2;
    double clip_norm = 1.0;
    std::uint64_t seed = 0;
};

void validate(const TrainConfig& cfg);

/// Gradient of the mean next-token cross-entropy, shaped like the network.
struct Gradients {
    linalg::Matrix embed;
    std::vector<linalg::Matrix> weights;  // per layer; empty for non-linear kinds
    std::vector<std::vector<double>> gain;
    std::vector<std::vector<double>> bias;

    double norm() const;
    void scale(double factor);
};

struct LossAndGrad {
    double loss = 0.0;
    Gradients grad;
};

/// Mean cross-entropy over every position of every window, and its gradient.
LossAndGrad loss_and_gradient(const model::Network& net,
                              const std::vector<std::span<const model::TokenId>>& windows);

/// Mean cross-entropy without the gradient.
double loss(const model::Network& net, const std::vector<std::span<const model::TokenId>>& windows);

/// net <- net - lr * grad.
void apply_update(model::Network& net, const Gradients& grad, double lr);

/// Draws `batch` windows: corpus chosen uniformly, offset uniformly in the
/// corpus' calibration split.
std::vector<std::span<const model::TokenId>> sample_batch(const std::vector<corpus::Corpus>& corpora,
                                                           std::size_t batch, std::size_t seq_len, Rng& rng);

/// First `per_corpus` windows of each corpus' evaluation split.
std::vector<std::span<const model::TokenId>> heldout_batch(const std::vector<corpus::Corpus>& corpora,
                                                            std::size_t per_corpus, std::size_t seq_len);

struct TrainResult {
    model::Network net;
    std::vector<double> loss_history;  // one entry per step
};

using ProgressFn = std::function<void(std::size_t step, double loss)>;

/// Throws TrainingError if the loss becomes non-finite.
TrainResult train(model::Network net, const std::vector<corpus::Corpus>& corpora, const TrainConfig& cfg,
                  const ProgressFn& progress = {});

}  // namespace copal::trainer
