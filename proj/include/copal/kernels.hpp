// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major GEMM kernels.
//
// Every kernel exists twice: a plain serial reference and an OpenMP
// version that parallelizes over output rows. Both accumulate each output
// entry in the same order, so their results are bit-identical and the
// serial path doubles as the test oracle for the parallel one.

#pragma once

#include <cstddef>

namespace copal::kernels {

namespace serial {

/// c[m x n] = a[m x k] * b[k x n]
void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);

/// c[m x n] = a[m x k] * b[n x k]^T
void gemm_bt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);

/// c[m x n] = a[k x m]^T * b[k x n]
void gemm_at(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);

}  // namespace serial

namespace parallel {

void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);
void gemm_bt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);
void gemm_at(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);

}  // namespace parallel

/// Number of OpenMP worker threads available to the parallel kernels.
int max_threads();

}  // namespace copal::kernels
