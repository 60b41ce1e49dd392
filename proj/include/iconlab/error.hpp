#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace iconlab {

// Error kinds map onto CLI exit codes: numerical failures exit 3, everything
// else that reaches the top level exits 2.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bad shapes, bad config values, invalid family ids.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Caller violated an operation's precondition (wrong row count, non-scalar loss, ...).
class ContractError : public Error {
public:
    using Error::Error;
};

/// Data that cannot be accepted: non-finite inputs, empty test sets.
class InputError : public Error {
public:
    using Error::Error;
};

/// File could not be opened, parsed or validated.
class IoError : public Error {
public:
    IoError(const std::string& what, std::int64_t line = -1)
        : Error(line >= 0 ? what + " (line " + std::to_string(line) + ")" : what), line_(line) {}

    std::int64_t line() const noexcept { return line_; }

private:
    std::int64_t line_;
};

/// Solver blow-up, singular systems, non-finite losses.
class NumericalError : public Error {
public:
    NumericalError(const std::string& what, std::int64_t step = -1)
        : Error(step >= 0 ? what + " at step " + std::to_string(step) : what), step_(step) {}

    std::int64_t step() const noexcept { return step_; }

private:
    std::int64_t step_;
};

/// Brute-force sampler could not reach the requested number of draws.
class ToleranceError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

}  // namespace iconlab
