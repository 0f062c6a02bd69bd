// Shared helpers for the unit tests. Oracles here are deliberately naive.

#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "copal/linalg.hpp"
#include "copal/rng.hpp"

namespace testsupport {

using copal::linalg::Matrix;

inline Matrix random_matrix(std::size_t r, std::size_t c, copal::Rng& rng, double sd = 1.0) {
    Matrix m(r, c);
    for (double& v : m.values()) v = rng.normal(0.0, sd);
    return m;
}

inline Matrix naive_matmul(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            long double acc = 0.0L;
            for (std::size_t k = 0; k < a.cols(); ++k) acc += static_cast<long double>(a(i, k)) * b(k, j);
            out(i, j) = static_cast<double>(acc);
        }
    return out;
}

inline Matrix naive_transpose(const Matrix& a) {
    Matrix t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

inline double rel_err(const Matrix& a, const Matrix& b) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (a.values()[i] - b.values()[i]) * (a.values()[i] - b.values()[i]);
        den += b.values()[i] * b.values()[i];
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

}  // namespace testsupport
