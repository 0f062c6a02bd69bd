// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale decoder-style network: token embedding, a stack of
// position-wise layers, and an output projection tied to the embedding.
//
// Every layer kind acts on each sequence position independently, so the
// logits at position t depend only on tokens up to t and any batch of
// windows can be evaluated as one stacked matrix.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "copal/linalg.hpp"

namespace copal::model {

using linalg::Matrix;
using TokenId = std::uint16_t;

enum class LayerKind : std::uint8_t { linear = 0, activation = 1, layer_norm = 2 };
enum class Activation : std::uint8_t { relu = 0, gelu = 1, tanh = 2 };

const char* to_string(LayerKind kind);
const char* to_string(Activation act);
Activation activation_from_string(std::string_view name);

double activate(Activation act, double x);
double activate_derivative(Activation act, double x);

inline constexpr double kLayerNormEpsilon = 1e-5;

struct LayerNormParams {
    std::vector<double> gain;
    std::vector<double> bias;

    bool operator==(const LayerNormParams&) const = default;
};

class Layer {
public:
    /// weight is out_dim x in_dim.
    static Layer linear(Matrix weight);
    static Layer activation(Activation act, std::size_t dim);
    static Layer layer_norm(std::size_t dim);
    static Layer layer_norm(LayerNormParams params);

    LayerKind kind() const noexcept { return kind_; }
    bool is_linear() const noexcept { return kind_ == LayerKind::linear; }
    std::size_t in_dim() const noexcept { return in_dim_; }
    std::size_t out_dim() const noexcept { return out_dim_; }

    /// Throws UsageError unless the layer is of the matching kind.
    const Matrix& weight() const;
    Activation activation_kind() const;
    const LayerNormParams& norm() const;

    /// Replaces a linear layer's weight; shape must match.
    void set_weight(Matrix weight);
    void set_norm(LayerNormParams params);

    bool operator==(const Layer&) const = default;

private:
    Layer() = default;

    LayerKind kind_ = LayerKind::linear;
    std::size_t in_dim_ = 0;
    std::size_t out_dim_ = 0;
    std::optional<Matrix> weight_;
    std::optional<Activation> activation_;
    std::optional<LayerNormParams> norm_;
};

/// Evaluates one layer on x (positions x in_dim). When given, the override
/// is used in place of the stored linear weight; the layer is unchanged.
Matrix layer_forward(const Layer& layer, const Matrix& x, const Matrix* weight_override = nullptr);

struct ModelShape {
    std::size_t vocab_size = 256;
    std::size_t model_dim = 64;
    std::size_t hidden_dim = 128;
    std::size_t blocks = 2;
    Activation activation = Activation::gelu;
};

class Network {
public:
    /// embed is vocab_size x model_dim. Throws ShapeError if the layer
    /// dimensions do not chain from model_dim back to model_dim.
    Network(Matrix embed, std::vector<Layer> layers);

    std::size_t vocab_size() const noexcept { return embed_.rows(); }
    std::size_t model_dim() const noexcept { return embed_.cols(); }
    const Matrix& embed() const noexcept { return embed_; }
    const std::vector<Layer>& layers() const noexcept { return layers_; }
    const Layer& layer(std::size_t i) const { return layers_.at(i); }

    /// Indices of the linear layers; these and only these get pruned.
    std::vector<std::size_t> prunable_indices() const;

    void set_linear_weight(std::size_t layer_index, Matrix weight);
    void set_embed(Matrix embed);
    void set_norm(std::size_t layer_index, LayerNormParams params);

    bool operator==(const Network&) const = default;

private:
    Matrix embed_;
    std::vector<Layer> layers_;
};

/// embedding -> [linear, activation, linear, layer_norm] x blocks.
Network make_network(const ModelShape& shape, std::uint64_t seed);

/// Logits of shape (len - 1) x vocab; row t predicts tokens[t + 1].
Matrix forward(const Network& net, std::span<const TokenId> tokens);

/// (layer index, input, output) seen by one prunable layer.
struct CaptureRecord {
    std::size_t layer_index = 0;
    Matrix input;
    Matrix output;
};

struct CaptureResult {
    Matrix logits;
    std::vector<CaptureRecord> records;
};

CaptureResult forward_capture(const Network& net, std::span<const TokenId> tokens);

/// Replays a record through its layer and compares bit-for-bit.
bool verify_capture(const Network& net, const CaptureRecord& record);

/// Embedding lookup for the prediction positions (all tokens but the last).
Matrix embed_inputs(const Network& net, std::span<const TokenId> tokens);

/// Hidden state after the last layer for each input row.
Matrix run_layers(const Network& net, Matrix hidden);

/// FNV-1a over every parameter that pruning must never touch
/// (embedding, norm gains/biases, layer structure).
std::uint64_t frozen_fingerprint(const Network& net);

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const Network& net);
Network decode_checkpoint(std::vector<std::uint8_t> bytes);
void save_checkpoint(const Network& net, const std::filesystem::path& path);
Network load_checkpoint(const std::filesystem::path& path);

}  // namespace copal::model
