// SPDX-License-Identifier: Apache-2.0

#include "copal/sensitivity.hpp"

#include <algorithm>

#include "copal/error.hpp"
#include "copal/rng.hpp"

namespace copal::sensitivity {

namespace {

Matrix gaussian_like(const Matrix& reference, double epsilon, Rng& rng) {
    Matrix out(reference.rows(), reference.cols());
    for (double& v : out.values()) {
        v = rng.normal();
    }
    const double target = epsilon * linalg::rms(reference);
    const double current = linalg::rms(out);
    return linalg::scale(out, current > 0.0 ? target / current : 0.0);
}

void require_input(const WeightedMap& f, const Matrix& x, const char* op) {
    if (x.empty() || x.rows() != f.in_dim()) {
        throw ShapeError(std::string(op) + ": input " + x.shape_string() + " does not fit weight " +
                         f.weight.shape_string());
    }
}

void require_output(const WeightedMap& f, const Matrix& x, const Matrix& y, const char* op) {
    require_input(f, x, op);
    if (y.rows() != f.out_dim() || y.cols() != x.cols()) {
        throw ShapeError(std::string(op) + ": output " + y.shape_string() + " does not match layer output " +
                         std::to_string(f.out_dim()) + "x" + std::to_string(x.cols()));
    }
}

}  // namespace

WeightedMap WeightedMap::from_layer(const model::Layer& linear) { return WeightedMap{linear.weight(), std::nullopt}; }

WeightedMap WeightedMap::from_layers(const model::Layer& linear, const model::Layer& activation) {
    if (activation.kind() != model::LayerKind::activation || activation.in_dim() != linear.out_dim()) {
        throw ShapeError("from_layers: second layer must be an activation of width " +
                         std::to_string(linear.out_dim()));
    }
    return WeightedMap{linear.weight(), activation.activation_kind()};
}

Matrix WeightedMap::apply(const Matrix& x) const { return apply_with(weight, x); }

Matrix WeightedMap::apply_with(const Matrix& w, const Matrix& x) const {
    if (!w.same_shape(weight)) {
        throw ShapeError("WeightedMap: weight " + w.shape_string() + " does not match " + weight.shape_string());
    }
    Matrix y = linalg::matmul(w, x);
    if (activation) {
        for (double& v : y.values()) {
            v = model::activate(*activation, v);
        }
    }
    return y;
}

Perturbation make_perturbation(const Matrix& weight, const Matrix& x, double epsilon, std::uint64_t seed) {
    if (!(epsilon >= 0.0)) {
        throw UsageError("perturbation epsilon must be non-negative");
    }
    Rng rng(mix_seed(seed));
    Perturbation p;
    p.delta_w = gaussian_like(weight, epsilon, rng);
    p.delta_x = gaussian_like(x, epsilon, rng);
    p.epsilon = epsilon;
    p.seed = seed;
    return p;
}

Matrix sensitivity_w(const WeightedMap& f, const Matrix& x, const Matrix& y, const Perturbation& p) {
    require_output(f, x, y, "sensitivity_w");
    if (!p.delta_w.same_shape(f.weight)) {
        throw ShapeError("sensitivity_w: delta_w " + p.delta_w.shape_string() + " vs weight " +
                         f.weight.shape_string());
    }
    return linalg::sub(f.apply_with(linalg::add(f.weight, p.delta_w), x), y);
}

Matrix sensitivity_x(const WeightedMap& f, const Matrix& x, const Matrix& y, const Perturbation& p) {
    require_output(f, x, y, "sensitivity_x");
    if (!p.delta_x.same_shape(x)) {
        throw ShapeError("sensitivity_x: delta_x " + p.delta_x.shape_string() + " vs input " + x.shape_string());
    }
    return linalg::sub(f.apply(linalg::add(x, p.delta_x)), y);
}

Matrix dfdw_surrogate(const WeightedMap& f, const Matrix& x, const Matrix& s_w, const Perturbation& p) {
    require_input(f, x, "dfdw_surrogate");
    if (f.is_linear()) {
        return x;
    }
    if (!p.delta_w.same_shape(f.weight)) {
        throw ShapeError("dfdw_surrogate: delta_w " + p.delta_w.shape_string() + " vs weight " +
                         f.weight.shape_string());
    }
    if (s_w.rows() != f.out_dim() || s_w.cols() != x.cols()) {
        throw ShapeError("dfdw_surrogate: s_w " + s_w.shape_string() + " does not match the layer output");
    }
    const std::size_t full = std::min(p.delta_w.rows(), p.delta_w.cols());
    const std::size_t r = linalg::rank(p.delta_w);
    if (r < full) {
        throw NumericalError("dfdw_surrogate: delta_w " + p.delta_w.shape_string() + " has rank " +
                             std::to_string(r) + " < " + std::to_string(full));
    }
    return linalg::matmul(linalg::pseudoinverse(p.delta_w), s_w);
}

Matrix loss_gradient(const Matrix& dy, const Matrix& dfdw) {
    if (dy.empty() || dfdw.empty() || dy.cols() != dfdw.cols()) {
        throw ShapeError("loss_gradient: dy " + dy.shape_string() + " and df/dW " + dfdw.shape_string() +
                         " do not compose");
    }
    return linalg::scale(linalg::matmul_bt(dy, dfdw), 2.0);
}

SensitivityRecord record(const WeightedMap& f, const Matrix& x, const Matrix& y, const Perturbation& p) {
    SensitivityRecord r;
    r.s_w = sensitivity_w(f, x, y, p);
    r.s_x = sensitivity_x(f, x, y, p);
    r.dy = linalg::add(r.s_w, r.s_x);
    r.dfdw = dfdw_surrogate(f, x, r.s_w, p);
    r.grad = loss_gradient(r.dy, r.dfdw);
    return r;
}

SensitivityRecord record_with_fresh_perturbation(const WeightedMap& f, const Matrix& x, double epsilon,
                                                 std::uint64_t seed, int max_attempts) {
    const Matrix y = f.apply(x);
    for (int attempt = 0;; ++attempt) {
        const std::uint64_t s = attempt == 0 ? seed : mix_seed(seed, static_cast<std::uint64_t>(attempt));
        const Perturbation p = make_perturbation(f.weight, x, epsilon, s);
        try {
            return record(f, x, y, p);
        } catch (const NumericalError&) {
            if (f.is_linear() || attempt + 1 >= max_attempts) {
                throw;
            }
        }
    }
}

}  // namespace copal::sensitivity
