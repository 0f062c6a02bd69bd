// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference output sensitivity of a weighted layer and the
// closed-form gradient of the squared output differential.
//
// Vectors are columns here: a layer maps x (in x n) to y = f(W x) (out x n),
// where each of the n columns is one sample.

#pragma once

#include <cstdint>
#include <optional>

#include "copal/linalg.hpp"
#include "copal/model.hpp"

namespace copal::sensitivity {

using linalg::Matrix;
using model::Activation;

inline constexpr double kDefaultEpsilon = 1e-3;

/// y = act(W x), or y = W x when there is no activation.
struct WeightedMap {
    Matrix weight;
    std::optional<Activation> activation;

    static WeightedMap from_layer(const model::Layer& linear);
    static WeightedMap from_layers(const model::Layer& linear, const model::Layer& activation);

    bool is_linear() const noexcept { return !activation.has_value(); }
    std::size_t in_dim() const noexcept { return weight.cols(); }
    std::size_t out_dim() const noexcept { return weight.rows(); }

    Matrix apply(const Matrix& x) const;
    Matrix apply_with(const Matrix& w, const Matrix& x) const;
};

struct Perturbation {
    Matrix delta_w;
    Matrix delta_x;
    double epsilon = kDefaultEpsilon;
    std::uint64_t seed = 0;
};

/// Gaussian perturbations rescaled so RMS(delta_w) = epsilon * RMS(W) and
/// RMS(delta_x) = epsilon * RMS(x).
Perturbation make_perturbation(const Matrix& weight, const Matrix& x, double epsilon, std::uint64_t seed);

struct SensitivityRecord {
    Matrix s_w;
    Matrix s_x;
    Matrix dy;
    Matrix dfdw;
    Matrix grad;
};

/// f(W + dW, x) - y
Matrix sensitivity_w(const WeightedMap& f, const Matrix& x, const Matrix& y, const Perturbation& p);

/// f(W, x + dx) - y
Matrix sensitivity_x(const WeightedMap& f, const Matrix& x, const Matrix& y, const Perturbation& p);

/// Stand-in for df/dW in the shape of x. Linear maps return x itself;
/// otherwise pinv(dW) * s_w, which reduces to x for a linear map whenever
/// dW has full column rank. Throws NumericalError if dW is rank deficient.
Matrix dfdw_surrogate(const WeightedMap& f, const Matrix& x, const Matrix& s_w, const Perturbation& p);

/// 2 * dy * dfdw^T, congruent to W.
Matrix loss_gradient(const Matrix& dy, const Matrix& dfdw);

SensitivityRecord record(const WeightedMap& f, const Matrix& x, const Matrix& y, const Perturbation& p);

/// Like record(), but draws the perturbation itself and, for nonlinear
/// maps, redraws with a derived seed while dW is rank deficient.
SensitivityRecord record_with_fresh_perturbation(const WeightedMap& f, const Matrix& x, double epsilon,
                                                 std::uint64_t seed, int max_attempts = 8);

}  // namespace copal::sensitivity
