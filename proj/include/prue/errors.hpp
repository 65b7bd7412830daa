#pragma once

#include <stdexcept>
#include <string>

namespace prue {

// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor/layer shape violations. Maps to CLI exit code 2.
struct ShapeError : Error {
    using Error::Error;
};

// Invalid configuration or CLI arguments. Maps to CLI exit code 2.
struct ConfigError : Error {
    using Error::Error;
};

// File format/IO failures (bad magic, truncation, unreadable path).
// Maps to CLI exit code 3.
struct IoError : Error {
    using Error::Error;
};

// Non-finite values produced by a computation. Maps to CLI exit code 4.
struct NumericError : Error {
    using Error::Error;
};

}  // namespace prue
