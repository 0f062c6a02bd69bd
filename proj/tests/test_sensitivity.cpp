#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>

#include "copal/error.hpp"
#include "copal/sensitivity.hpp"
#include "support.hpp"

using namespace copal;
using namespace copal::sensitivity;
using linalg::Matrix;
using testsupport::naive_matmul;
using testsupport::naive_transpose;
using testsupport::random_matrix;
using testsupport::rel_err;

namespace {

WeightedMap map_of(const Matrix& w, std::optional<model::Activation> act) { return WeightedMap{w, act}; }

// L(dW) = || s_x + dW * dfdw ||^2 with dfdw held fixed.
double surrogate_loss(const Matrix& s_x, const Matrix& dw, const Matrix& dfdw) {
    const Matrix u = linalg::add(s_x, naive_matmul(dw, dfdw));
    double l = 0.0;
    for (const double v : u.values()) l += v * v;
    return l;
}

}  // namespace

TEST_CASE("linear maps: s_w is dW x and the surrogate is x itself") {
    Rng rng(21);
    for (int t = 0; t < 10; ++t) {
        const Matrix w = random_matrix(6, 4, rng);
        const Matrix x = random_matrix(4, 3, rng);
        const auto f = map_of(w, std::nullopt);
        const auto p = make_perturbation(w, x, kDefaultEpsilon, 100 + t);
        const Matrix y = f.apply(x);
        const auto rec = record(f, x, y, p);
        CHECK(linalg::max_abs_diff(rec.s_w, naive_matmul(p.delta_w, x)) < 1e-12);
        CHECK(rec.dfdw == x);
        CHECK(linalg::max_abs_diff(rec.dy, linalg::add(rec.s_w, rec.s_x)) == 0.0);
        CHECK(rec.grad.rows() == w.rows());
        CHECK(rec.grad.cols() == w.cols());
    }
}

TEST_CASE("pinv surrogate reduces to x on a linear map with tall dW") {
    Rng rng(22);
    const Matrix w = random_matrix(7, 3, rng);
    const Matrix x = random_matrix(3, 2, rng);
    const auto f = map_of(w, std::nullopt);
    const auto p = make_perturbation(w, x, kDefaultEpsilon, 5);
    const Matrix s_w = naive_matmul(p.delta_w, x);
    const Matrix surrogate = naive_matmul(linalg::pseudoinverse(p.delta_w), s_w);
    CHECK(linalg::max_abs_diff(surrogate, x) < 1e-9);
}

TEST_CASE("perturbations hit the requested relative RMS and are seeded") {
    Rng rng(23);
    const Matrix w = random_matrix(16, 8, rng, 0.3);
    const Matrix x = random_matrix(8, 1, rng, 2.0);
    const auto p = make_perturbation(w, x, 1e-3, 9);
    CHECK(linalg::rms(p.delta_w) == doctest::Approx(1e-3 * linalg::rms(w)).epsilon(1e-12));
    CHECK(linalg::rms(p.delta_x) == doctest::Approx(1e-3 * linalg::rms(x)).epsilon(1e-12));
    CHECK(make_perturbation(w, x, 1e-3, 9).delta_w == p.delta_w);
    CHECK_FALSE(make_perturbation(w, x, 1e-3, 10).delta_w == p.delta_w);
    CHECK_THROWS_AS(make_perturbation(w, x, -1.0, 1), UsageError);
}

TEST_CASE("loss gradient matches central differences") {
    Rng rng(24);
    const std::optional<model::Activation> acts[] = {std::nullopt, model::Activation::relu, model::Activation::tanh};
    for (const auto act : acts) {
        for (int t = 0; t < 5; ++t) {
            // square or wide weights keep dW full row rank, so dW pinv(dW) = I
            const std::size_t out = 3 + rng.index(3);
            const Matrix w = random_matrix(out, out + rng.index(3), rng);
            const Matrix x = random_matrix(w.cols(), 1 + rng.index(3), rng);
            const auto f = map_of(w, act);
            const auto p = make_perturbation(w, x, 1e-3, 1000 + t);
            const auto rec = record(f, x, f.apply(x), p);
            // the surrogate loss at dW equals ||dy||^2
            double dy2 = 0.0;
            for (const double v : rec.dy.values()) dy2 += v * v;
            CHECK(surrogate_loss(rec.s_x, p.delta_w, rec.dfdw) == doctest::Approx(dy2).epsilon(1e-9));

            Matrix fd(w.rows(), w.cols());
            const double h = 1e-6 * linalg::rms(p.delta_w);
            for (std::size_t i = 0; i < w.rows(); ++i) {
                for (std::size_t j = 0; j < w.cols(); ++j) {
                    Matrix plus = p.delta_w, minus = p.delta_w;
                    plus(i, j) += h;
                    minus(i, j) -= h;
                    fd(i, j) = (surrogate_loss(rec.s_x, plus, rec.dfdw) - surrogate_loss(rec.s_x, minus, rec.dfdw)) /
                               (2 * h);
                }
            }
            CHECK(rel_err(rec.grad, fd) < 1e-4);
        }
    }
}

TEST_CASE("loss gradient is 2 dy dfdw^T") {
    const Matrix dy{{1.0}, {-2.0}};
    const Matrix dfdw{{3.0}, {0.5}, {-1.0}};
    const Matrix g = loss_gradient(dy, dfdw);
    CHECK(g == Matrix{{6.0, 1.0, -2.0}, {-12.0, -2.0, 4.0}});
    CHECK_THROWS_AS(loss_gradient(Matrix(2, 2), Matrix(3, 1)), ShapeError);
}

TEST_CASE("rank-deficient dW on a nonlinear map is a numerical error") {
    const Matrix w{{1.0, 0.0}, {0.0, 1.0}};
    const Matrix x{{0.5}, {0.25}};
    const auto f = map_of(w, model::Activation::tanh);
    Perturbation p{Matrix{{1e-3, 1e-3}, {1e-3, 1e-3}}, Matrix{{1e-4}, {1e-4}}, 1e-3, 0};
    CHECK_THROWS_AS(dfdw_surrogate(f, x, sensitivity_w(f, x, f.apply(x), p), p), NumericalError);
    CHECK_NOTHROW(record_with_fresh_perturbation(f, x, 1e-3, 3));
}

TEST_CASE("nonlinear sensitivity uses the activation") {
    const Matrix w{{1.0, -1.0}};
    const Matrix x{{-1.0}, {1.0}};
    const auto f = map_of(w, model::Activation::relu);
    const Matrix y = f.apply(x);
    CHECK(y(0, 0) == 0.0);
    Perturbation p{Matrix{{1e-3, 1e-3}}, Matrix{{1e-3}, {1e-3}}, 1e-3, 0};
    // pre-activation stays at -2, so relu kills both sensitivities
    CHECK(sensitivity_w(f, x, y, p)(0, 0) == 0.0);
    CHECK(sensitivity_x(f, x, y, p)(0, 0) == 0.0);
}

namespace {

Matrix pre_activation_derivative(model::Activation act, const Matrix& z) {
    Matrix d(z.rows(), z.cols());
    for (std::size_t i = 0; i < z.size(); ++i) {
        const double v = z.values()[i];
        switch (act) {
        case model::Activation::relu: d.values()[i] = v > 0 ? 1.0 : 0.0; break;
        case model::Activation::tanh: d.values()[i] = 1.0 - std::tanh(v) * std::tanh(v); break;
        default: throw std::logic_error("no oracle for this activation");
        }
    }
    return d;
}

// W with every pre-activation of x at least `margin` away from zero.
Matrix weight_with_margin(std::size_t out, const Matrix& x, Rng& rng, double margin) {
    while (true) {
        Matrix w = random_matrix(out, x.rows(), rng);
        const Matrix z = naive_matmul(w, x);
        bool ok = true;
        for (const double v : z.values()) ok = ok && std::abs(v) > margin;
        if (ok) return w;
    }
}

std::vector<double> ranks(std::span<const double> v) {
    std::vector<std::size_t> idx(v.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t k = 0; k < idx.size(); ++k) r[idx[k]] = static_cast<double>(k);
    return r;
}

double spearman(std::span<const double> a, std::span<const double> b) {
    const auto ra = ranks(a);
    const auto rb = ranks(b);
    const double n = static_cast<double>(a.size());
    double d2 = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) d2 += (ra[i] - rb[i]) * (ra[i] - rb[i]);
    return 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
}

}  // namespace

TEST_CASE("zero perturbations give zero sensitivities") {
    Rng rng(31);
    const Matrix w = random_matrix(4, 3, rng);
    const Matrix x = random_matrix(3, 2, rng);
    const Perturbation zero{Matrix(4, 3), Matrix(3, 2), 0.0, 0};
    const auto f = map_of(w, std::nullopt);
    const auto rec = record(f, x, f.apply(x), zero);
    CHECK(rec.s_w == Matrix(4, 2));
    CHECK(rec.s_x == Matrix(4, 2));
    CHECK(rec.dy == Matrix(4, 2));
    CHECK(rec.grad == Matrix(4, 3));
    const auto g = map_of(w, model::Activation::tanh);
    CHECK(sensitivity_w(g, x, g.apply(x), zero) == Matrix(4, 2));
    CHECK(sensitivity_x(g, x, g.apply(x), zero) == Matrix(4, 2));
}

TEST_CASE("linear s_x is W dx") {
    Rng rng(32);
    const Matrix w = random_matrix(5, 4, rng);
    const Matrix x = random_matrix(4, 3, rng);
    const auto f = map_of(w, std::nullopt);
    const auto p = make_perturbation(w, x, 0.25, 6);
    CHECK(linalg::max_abs_diff(sensitivity_x(f, x, f.apply(x), p), naive_matmul(w, p.delta_x)) < 1e-12);
}

TEST_CASE("relu s_w follows the analytic Jacobian away from the kink") {
    Rng rng(33);
    for (int t = 0; t < 10; ++t) {
        const Matrix x = random_matrix(6, 3, rng);
        const Matrix w = weight_with_margin(5, x, rng, 0.05);
        const auto f = map_of(w, model::Activation::relu);
        const auto p = make_perturbation(w, x, 1e-6, 40 + t);
        const Matrix d = pre_activation_derivative(model::Activation::relu, naive_matmul(w, x));
        const Matrix oracle = linalg::elementwise_mul(d, naive_matmul(p.delta_w, x));
        CHECK(linalg::max_abs_diff(sensitivity_w(f, x, f.apply(x), p), oracle) < 1e-6);
    }
}

TEST_CASE("tanh s_x matches the Jacobian to second order") {
    Rng rng(34);
    const Matrix w = random_matrix(5, 4, rng, 0.5);
    const Matrix x = random_matrix(4, 2, rng);
    const auto f = map_of(w, model::Activation::tanh);
    const Matrix d = pre_activation_derivative(model::Activation::tanh, naive_matmul(w, x));
    double prev = 0.0;
    for (const double eps : {1e-2, 1e-3}) {
        const auto p = make_perturbation(w, x, eps, 8);
        const Matrix oracle = linalg::elementwise_mul(d, naive_matmul(w, p.delta_x));
        const double err = linalg::max_abs_diff(sensitivity_x(f, x, f.apply(x), p), oracle);
        CHECK(err < 10.0 * eps * eps);
        // ten times smaller eps, roughly a hundred times smaller error
        if (prev > 0.0) CHECK(err < prev / 50.0);
        prev = err;
    }
}

TEST_CASE("surrogate with dW = eps I is s_w / eps") {
    Rng rng(35);
    const Matrix w = random_matrix(4, 4, rng);
    const Matrix x = random_matrix(4, 2, rng);
    const double eps = 1e-3;
    const auto f = map_of(w, model::Activation::tanh);
    const Perturbation p{linalg::scale(Matrix::identity(4), eps), Matrix(4, 2), eps, 0};
    const Matrix s_w = sensitivity_w(f, x, f.apply(x), p);
    CHECK(rel_err(dfdw_surrogate(f, x, s_w, p), linalg::scale(s_w, 1.0 / eps)) < 1e-12);
}

TEST_CASE("relu surrogate matches the analytic first-order form") {
    Rng rng(36);
    for (int t = 0; t < 10; ++t) {
        const Matrix x = random_matrix(6, 1, rng);
        const Matrix w = weight_with_margin(6, x, rng, 0.05);
        const auto f = map_of(w, model::Activation::relu);
        const auto p = make_perturbation(w, x, 1e-3, 70 + t);
        const Matrix s_w = sensitivity_w(f, x, f.apply(x), p);
        const Matrix d = pre_activation_derivative(model::Activation::relu, naive_matmul(w, x));
        const Matrix jac_dw = linalg::elementwise_mul(d, naive_matmul(p.delta_w, x));
        const Matrix oracle = naive_matmul(linalg::pseudoinverse(p.delta_w), jac_dw);
        CHECK(rel_err(dfdw_surrogate(f, x, s_w, p), oracle) < 0.05);
    }
}

TEST_CASE("zero dy gives a zero gradient; outer-product example") {
    CHECK(loss_gradient(Matrix(2, 1), Matrix{{3}, {4}}) == Matrix(2, 2));
    CHECK(loss_gradient(Matrix{{1}, {2}}, Matrix{{3}, {4}}) == Matrix{{6, 8}, {12, 16}});
}

TEST_CASE("record equals the individually invoked operations") {
    Rng rng(37);
    const Matrix w = random_matrix(5, 5, rng);
    const Matrix x = random_matrix(5, 2, rng);
    for (const std::optional<model::Activation> act : {std::optional<model::Activation>{}, std::optional{model::Activation::gelu}}) {
        const auto f = map_of(w, act);
        const Matrix y = f.apply(x);
        const auto p = make_perturbation(w, x, 1e-3, 3);
        const auto rec = record(f, x, y, p);
        const Matrix s_w = sensitivity_w(f, x, y, p);
        const Matrix s_x = sensitivity_x(f, x, y, p);
        const Matrix dfdw = dfdw_surrogate(f, x, s_w, p);
        CHECK(rec.s_w == s_w);
        CHECK(rec.s_x == s_x);
        CHECK(rec.dy == linalg::add(s_w, s_x));
        CHECK(rec.dfdw == dfdw);
        CHECK(rec.grad == loss_gradient(rec.dy, dfdw));
    }
}

TEST_CASE("halving eps halves s_w on smooth layers") {
    Rng rng(38);
    const Matrix w = random_matrix(8, 6, rng, 0.5);
    const Matrix x = random_matrix(6, 3, rng);
    for (const auto act : {model::Activation::tanh, model::Activation::gelu}) {
        const auto f = map_of(w, act);
        const Matrix y = f.apply(x);
        const double full = linalg::frobenius_norm(sensitivity_w(f, x, y, make_perturbation(w, x, 1e-3, 5)));
        const double half = linalg::frobenius_norm(sensitivity_w(f, x, y, make_perturbation(w, x, 5e-4, 5)));
        CHECK(half / full == doctest::Approx(0.5).epsilon(0.01));
    }
}

TEST_CASE("importance rankings are stable across perturbation seeds") {
    Rng rng(39);
    const Matrix w = random_matrix(64, 64, rng, 0.125);
    const auto f = map_of(w, std::nullopt);
    std::vector<Matrix> xs;
    for (int k = 0; k < 16; ++k) xs.push_back(random_matrix(64, 1, rng));
    double worst_single = 1.0, worst_acc = 1.0;
    for (std::uint64_t s = 0; s < 20; ++s) {
        Matrix acc_a(64, 64), acc_b(64, 64);
        for (std::size_t k = 0; k < xs.size(); ++k) {
            const Matrix y = f.apply(xs[k]);
            const auto a = record(f, xs[k], y, make_perturbation(w, xs[k], 1e-3, 1000 * s + 2 * k));
            const auto b = record(f, xs[k], y, make_perturbation(w, xs[k], 1e-3, 1000 * s + 2 * k + 1));
            CHECK_FALSE(a.grad == b.grad);
            const Matrix ia = linalg::elementwise_abs(linalg::elementwise_mul(w, a.grad));
            const Matrix ib = linalg::elementwise_abs(linalg::elementwise_mul(w, b.grad));
            if (k == 0) worst_single = std::min(worst_single, spearman(ia.values(), ib.values()));
            linalg::add_inplace(acc_a, ia);
            linalg::add_inplace(acc_b, ib);
        }
        worst_acc = std::min(worst_acc, spearman(acc_a.values(), acc_b.values()));
    }
    MESSAGE("worst spearman: single record " << worst_single << ", 16 accumulated " << worst_acc);
    CHECK(worst_single > 0.0);
    CHECK(worst_acc > 0.9);
}
