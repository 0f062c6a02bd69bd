// SPDX-License-Identifier: Apache-2.0

#include "copal/kernels.hpp"

#include <algorithm>
#include <vector>

#include <omp.h>

namespace copal::kernels {

namespace {

// Below this many multiply-adds the thread fork costs more than it saves.
constexpr std::size_t kParallelThreshold = 1u << 15;

inline void gemm_row(const double* a_row, const double* b, double* c_row, std::size_t k, std::size_t n) {
    std::fill(c_row, c_row + n, 0.0);
    for (std::size_t p = 0; p < k; ++p) {
        const double av = a_row[p];
        const double* b_row = b + p * n;
        for (std::size_t j = 0; j < n; ++j) {
            c_row[j] += av * b_row[j];
        }
    }
}

inline void gemm_at_row(const double* a, const double* b, double* c_row, std::size_t row, std::size_t m,
                        std::size_t k, std::size_t n) {
    std::fill(c_row, c_row + n, 0.0);
    for (std::size_t t = 0; t < k; ++t) {
        const double av = a[t * m + row];
        const double* b_row = b + t * n;
        for (std::size_t j = 0; j < n; ++j) {
            c_row[j] += av * b_row[j];
        }
    }
}

std::vector<double> transpose_copy(const double* b, std::size_t rows, std::size_t cols) {
    std::vector<double> t(rows * cols);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            t[c * rows + r] = b[r * cols + c];
        }
    }
    return t;
}

}  // namespace

namespace serial {

void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        gemm_row(a + i * k, b, c + i * n, k, n);
    }
}

void gemm_bt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    const std::vector<double> bt = transpose_copy(b, n, k);
    gemm(a, bt.data(), c, m, k, n);
}

void gemm_at(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        gemm_at_row(a, b, c + i * n, i, m, k, n);
    }
}

}  // namespace serial

namespace parallel {

void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    const bool go_wide = m * k * n >= kParallelThreshold;
#pragma omp parallel for schedule(static) if (go_wide)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
        gemm_row(a + i * k, b, c + i * n, k, n);
    }
}

void gemm_bt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    const std::vector<double> bt = transpose_copy(b, n, k);
    gemm(a, bt.data(), c, m, k, n);
}

void gemm_at(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    const bool go_wide = m * k * n >= kParallelThreshold;
#pragma omp parallel for schedule(static) if (go_wide)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
        gemm_at_row(a, b, c + i * n, static_cast<std::size_t>(i), m, k, n);
    }
}

}  // namespace parallel

int max_threads() { return omp_get_max_threads(); }

}  // namespace copal::kernels
