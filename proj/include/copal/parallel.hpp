// SPDX-License-Identifier: Apache-2.0
//
// Exceptions may not leave an OpenMP region. Loop bodies run through
// ErrorSlot::run, and the error of the lowest failing iteration is
// rethrown after the loop, so the reported error is the same for any
// thread count.

#pragma once

#include <cstddef>
#include <exception>
#include <limits>

namespace copal {

class ErrorSlot {
public:
    template <class F>
    void run(std::size_t iteration, F&& body) noexcept {
        try {
            body();
        } catch (...) {
#pragma omp critical(copal_error_slot)
            {
                if (iteration < iteration_) {
                    iteration_ = iteration;
                    error_ = std::current_exception();
                }
            }
        }
    }

    void rethrow() const {
        if (error_) {
            std::rethrow_exception(error_);
        }
    }

private:
    std::size_t iteration_ = std::numeric_limits<std::size_t>::max();
    std::exception_ptr error_;
};

}  // namespace copal
