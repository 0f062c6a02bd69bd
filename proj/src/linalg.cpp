// SPDX-License-Identifier: Apache-2.0

#include "copal/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <utility>

#include <Eigen/SVD>

#include "copal/error.hpp"
#include "copal/kernels.hpp"

namespace copal::linalg {

namespace {

void require_nonempty(const Matrix& a, const char* op) {
    if (a.empty()) {
        throw ShapeError(std::string(op) + ": empty matrix");
    }
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    require_nonempty(a, op);
    require_nonempty(b, op);
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " + b.shape_string());
    }
}

template <typename Fn>
Matrix zip(const Matrix& a, const Matrix& b, const char* op, Fn fn) {
    require_same_shape(a, b, op);
    Matrix out(a.rows(), a.cols());
    const auto av = a.values();
    const auto bv = b.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) {
        ov[i] = fn(av[i], bv[i]);
    }
    ensure_finite(out, op);
    return out;
}

bool less_by_value_then_index(std::span<const double> v, std::size_t a, std::size_t b) {
    return v[a] < v[b] || (v[a] == v[b] && a < b);
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill) : rows_(rows), cols_(cols), data_(rows * cols, fill) {
    if (rows == 0 || cols == 0) {
        throw ShapeError("Matrix: dimensions must be positive, got " + shape_string());
    }
    if (!std::isfinite(fill)) {
        throw NumericalError("Matrix: non-finite fill value");
    }
}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (rows == 0 || cols == 0) {
        throw ShapeError("Matrix: dimensions must be positive, got " + shape_string());
    }
    if (data_.size() != rows * cols) {
        throw ShapeError("Matrix: data length " + std::to_string(data_.size()) + " does not match " +
                         shape_string());
    }
    ensure_finite(*this, "Matrix");
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    if (rows_ == 0 || cols_ == 0) {
        throw ShapeError("Matrix: dimensions must be positive");
    }
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
        if (r.size() != cols_) {
            throw ShapeError("Matrix: ragged initializer");
        }
        data_.insert(data_.end(), r.begin(), r.end());
    }
    ensure_finite(*this, "Matrix");
}

Matrix Matrix::identity(std::size_t n) {
    Matrix out(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        out(i, i) = 1.0;
    }
    return out;
}

Matrix Matrix::diagonal(std::span<const double> values) {
    Matrix out(values.size(), values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        out(i, i) = values[i];
    }
    ensure_finite(out, "Matrix::diagonal");
    return out;
}

Matrix Matrix::column(std::span<const double> values) {
    return Matrix(values.size(), 1, std::vector<double>(values.begin(), values.end()));
}

std::string Matrix::shape_string() const {
    std::ostringstream os;
    os << rows_ << "x" << cols_;
    return os.str();
}

void ensure_finite(const Matrix& a, const char* what) {
    for (const double v : a.values()) {
        if (!std::isfinite(v)) {
            throw NumericalError(std::string(what) + ": non-finite entry in " + a.shape_string() + " matrix");
        }
    }
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    require_nonempty(a, "matmul");
    require_nonempty(b, "matmul");
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: " + a.shape_string() + " x " + b.shape_string());
    }
    Matrix out(a.rows(), b.cols());
    kernels::parallel::gemm(a.data(), b.data(), out.data(), a.rows(), a.cols(), b.cols());
    ensure_finite(out, "matmul");
    return out;
}

Matrix matmul_bt(const Matrix& a, const Matrix& b) {
    require_nonempty(a, "matmul_bt");
    require_nonempty(b, "matmul_bt");
    if (a.cols() != b.cols()) {
        throw ShapeError("matmul_bt: " + a.shape_string() + " x (" + b.shape_string() + ")^T");
    }
    Matrix out(a.rows(), b.rows());
    kernels::parallel::gemm_bt(a.data(), b.data(), out.data(), a.rows(), a.cols(), b.rows());
    ensure_finite(out, "matmul_bt");
    return out;
}

Matrix matmul_at(const Matrix& a, const Matrix& b) {
    require_nonempty(a, "matmul_at");
    require_nonempty(b, "matmul_at");
    if (a.rows() != b.rows()) {
        throw ShapeError("matmul_at: (" + a.shape_string() + ")^T x " + b.shape_string());
    }
    Matrix out(a.cols(), b.cols());
    kernels::parallel::gemm_at(a.data(), b.data(), out.data(), a.cols(), a.rows(), b.cols());
    ensure_finite(out, "matmul_at");
    return out;
}

Matrix transpose(const Matrix& a) {
    require_nonempty(a, "transpose");
    Matrix out(a.cols(), a.rows());
    for (std::size_t r = 0; r < a.rows(); ++r) {
        for (std::size_t c = 0; c < a.cols(); ++c) {
            out(c, r) = a(r, c);
        }
    }
    return out;
}

Matrix add(const Matrix& a, const Matrix& b) {
    return zip(a, b, "add", [](double x, double y) { return x + y; });
}

Matrix sub(const Matrix& a, const Matrix& b) {
    return zip(a, b, "sub", [](double x, double y) { return x - y; });
}

Matrix elementwise_mul(const Matrix& a, const Matrix& b) {
    return zip(a, b, "elementwise_mul", [](double x, double y) { return x * y; });
}

Matrix scale(const Matrix& a, double factor) {
    require_nonempty(a, "scale");
    Matrix out = a;
    for (double& v : out.values()) {
        v *= factor;
    }
    ensure_finite(out, "scale");
    return out;
}

Matrix elementwise_abs(const Matrix& a) {
    require_nonempty(a, "elementwise_abs");
    Matrix out = a;
    for (double& v : out.values()) {
        v = std::fabs(v);
    }
    return out;
}

void add_inplace(Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "add_inplace");
    auto av = a.values();
    const auto bv = b.values();
    for (std::size_t i = 0; i < av.size(); ++i) {
        av[i] += bv[i];
    }
    ensure_finite(a, "add_inplace");
}

double frobenius_norm(const Matrix& a) {
    require_nonempty(a, "frobenius_norm");
    double sum = 0.0;
    for (const double v : a.values()) {
        sum += v * v;
    }
    return std::sqrt(sum);
}

double rms(const Matrix& a) {
    return frobenius_norm(a) / std::sqrt(static_cast<double>(a.size()));
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "max_abs_diff");
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, std::fabs(a.values()[i] - b.values()[i]));
    }
    return worst;
}

double relative_error(const Matrix& a, const Matrix& b) {
    const double denom = std::max(frobenius_norm(b), std::numeric_limits<double>::min());
    return frobenius_norm(sub(a, b)) / denom;
}

Matrix column_mean_of_rows(const Matrix& a) {
    require_nonempty(a, "column_mean_of_rows");
    Matrix out(a.cols(), 1);
    for (std::size_t r = 0; r < a.rows(); ++r) {
        for (std::size_t c = 0; c < a.cols(); ++c) {
            out(c, 0) += a(r, c);
        }
    }
    const double inv = 1.0 / static_cast<double>(a.rows());
    for (double& v : out.values()) {
        v *= inv;
    }
    return out;
}

Svd svd(const Matrix& a) {
    require_nonempty(a, "svd");
    ensure_finite(a, "svd");
    using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const Eigen::Map<const RowMajor> view(a.values().data(), static_cast<Eigen::Index>(a.rows()),
                                          static_cast<Eigen::Index>(a.cols()));
    const Eigen::JacobiSVD<Eigen::MatrixXd> dec(view, Eigen::ComputeThinU | Eigen::ComputeThinV);
    if (dec.info() != Eigen::Success) {
        throw NumericalError("svd: decomposition failed for " + a.shape_string() + " matrix");
    }
    const auto r = static_cast<std::size_t>(dec.singularValues().size());
    Svd out{Matrix(a.rows(), r), std::vector<double>(r), Matrix(a.cols(), r)};
    for (std::size_t k = 0; k < r; ++k) {
        const auto kk = static_cast<Eigen::Index>(k);
        out.singular[k] = dec.singularValues()(kk);
        for (std::size_t i = 0; i < a.rows(); ++i) out.u(i, k) = dec.matrixU()(static_cast<Eigen::Index>(i), kk);
        for (std::size_t i = 0; i < a.cols(); ++i) out.v(i, k) = dec.matrixV()(static_cast<Eigen::Index>(i), kk);
    }
    return out;
}

Matrix pseudoinverse(const Matrix& a, double tol) {
    if (!(tol > 0.0)) {
        throw UsageError("pseudoinverse: tolerance must be positive");
    }
    const Svd s = svd(a);
    const std::size_t r = s.singular.size();
    const double cutoff = tol * (r > 0 ? s.singular.front() : 0.0);
    // A+ = V diag(1/sigma) U^T over the retained singular values.
    Matrix out(a.cols(), a.rows());
    for (std::size_t k = 0; k < r; ++k) {
        const double sigma = s.singular[k];
        if (sigma <= cutoff || sigma == 0.0) {
            continue;
        }
        const double inv = 1.0 / sigma;
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double vik = s.v(i, k) * inv;
            if (vik == 0.0) {
                continue;
            }
            for (std::size_t j = 0; j < a.rows(); ++j) {
                out(i, j) += vik * s.u(j, k);
            }
        }
    }
    ensure_finite(out, "pseudoinverse");
    return out;
}

std::size_t rank(const Matrix& a, double tol) {
    if (!(tol > 0.0)) {
        throw UsageError("rank: tolerance must be positive");
    }
    const Svd s = svd(a);
    if (s.singular.empty() || s.singular.front() == 0.0) {
        return 0;
    }
    const double cutoff = tol * s.singular.front();
    return static_cast<std::size_t>(
        std::count_if(s.singular.begin(), s.singular.end(), [&](double x) { return x > cutoff; }));
}

std::vector<std::size_t> lowest_k(std::span<const double> values, std::size_t k) {
    k = std::min(k, values.size());
    std::vector<std::size_t> idx(values.size());
    std::iota(idx.begin(), idx.end(), 0);
    auto cmp = [&](std::size_t x, std::size_t y) { return less_by_value_then_index(values, x, y); };
    if (k < idx.size()) {
        std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), cmp);
    }
    idx.resize(k);
    std::sort(idx.begin(), idx.end(), cmp);
    return idx;
}

std::vector<std::size_t> argsort_ascending(std::span<const double> values) {
    std::vector<std::size_t> idx(values.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return less_by_value_then_index(values, x, y); });
    return idx;
}

}  // namespace copal::linalg
