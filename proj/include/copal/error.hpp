// SPDX-License-Identifier: Apache-2.0
//
// Exception hierarchy shared by every module.

#pragma once

#include <stdexcept>
#include <string>

namespace copal {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Incompatible matrix / tensor shapes.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// SVD non-convergence, rank deficiency, non-finite values.
class NumericalError : public Error {
public:
    using Error::Error;
};

/// Malformed checkpoint, state, mask or report file.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Bad user-provided data (empty corpus, out-of-range token, ...).
class InputError : public Error {
public:
    using Error::Error;
};

/// API misuse (missing auxiliary input, invalid N:M pattern, ...).
class UsageError : public Error {
public:
    using Error::Error;
};

/// Aggregation over an evaluation grid with missing cells.
class CompletenessError : public Error {
public:
    using Error::Error;
};

class TrainingError : public Error {
public:
    using Error::Error;
};

}  // namespace copal
