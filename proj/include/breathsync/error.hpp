#pragma once

#include <stdexcept>
#include <string>

namespace breathsync {

/// Raised for out-of-contract arguments (bad T, level out of range, ...).
class ParameterError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when an input sample stream violates its contract: non-finite
/// values, non-increasing timestamps or a sampling interval outside tolerance.
class StreamError : public std::runtime_error {
public:
    StreamError(std::string what, unsigned long long t_ms)
        : std::runtime_error(std::move(what)), t_ms_(t_ms) {}

    unsigned long long t_ms() const noexcept { return t_ms_; }

private:
    unsigned long long t_ms_;
};

} // namespace breathsync
