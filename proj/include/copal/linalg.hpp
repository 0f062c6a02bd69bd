// SPDX-License-Identifier: Apache-2.0
//
// Small dense matrices in double precision: arithmetic, norms, rank-based
// selection, and an SVD-backed Moore-Penrose pseudoinverse.

#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace copal::linalg {

/// Dense row-major matrix of finite doubles.
///
/// A default-constructed matrix is 0x0 and acts as "no value"; every
/// operation in this module rejects it. All other matrices have positive
/// dimensions and only finite entries (checked on construction from data).
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
    Matrix(std::initializer_list<std::initializer_list<double>> rows);

    static Matrix identity(std::size_t n);
    static Matrix diagonal(std::span<const double> values);
    static Matrix column(std::span<const double> values);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }
    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    double* data() noexcept { return data_.data(); }
    const double* data() const noexcept { return data_.data(); }

    bool same_shape(const Matrix& other) const noexcept {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }
    std::string shape_string() const;

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

/// Throws NumericalError if any entry is NaN or infinite.
void ensure_finite(const Matrix& a, const char* what);

Matrix matmul(const Matrix& a, const Matrix& b);
/// a * b^T without materializing the transpose.
Matrix matmul_bt(const Matrix& a, const Matrix& b);
/// a^T * b without materializing the transpose.
Matrix matmul_at(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);

Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double factor);
Matrix elementwise_mul(const Matrix& a, const Matrix& b);
Matrix elementwise_abs(const Matrix& a);

/// In-place a += b.
void add_inplace(Matrix& a, const Matrix& b);

double frobenius_norm(const Matrix& a);
/// Root-mean-square of the entries.
double rms(const Matrix& a);
double max_abs_diff(const Matrix& a, const Matrix& b);
/// ||a - b||_F / max(||b||_F, tiny)
double relative_error(const Matrix& a, const Matrix& b);

/// Mean of the rows, returned as a cols x 1 column vector.
Matrix column_mean_of_rows(const Matrix& a);

struct Svd {
    Matrix u;                     // m x r, orthonormal columns
    std::vector<double> singular; // r values, descending
    Matrix v;                     // n x r, orthonormal columns
};

inline constexpr double kDefaultRankTolerance = 1e-10;

/// Thin SVD (Eigen's two-sided Jacobi), r = min(m, n).
Svd svd(const Matrix& a);

/// Moore-Penrose pseudoinverse; singular values <= tol * sigma_max count as zero.
Matrix pseudoinverse(const Matrix& a, double tol = kDefaultRankTolerance);

std::size_t rank(const Matrix& a, double tol = kDefaultRankTolerance);

/// Flat indices of the k smallest values, ties broken by lower index.
/// The result is sorted by (value, index).
std::vector<std::size_t> lowest_k(std::span<const double> values, std::size_t k);

/// Indices ordered by (value ascending, index ascending).
std::vector<std::size_t> argsort_ascending(std::span<const double> values);

}  // namespace copal::linalg
