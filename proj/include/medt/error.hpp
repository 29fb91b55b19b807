#pragma once

#include <stdexcept>
#include <string>

namespace medt {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform for the requested kernel.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A forward kernel produced NaN/Inf, or training diverged.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Input violates a domain rule (horizon too long, wrong arity, ...).
class DomainError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class ChecksumError : public IoError {
public:
    using IoError::IoError;
};

class UnsupportedVersionError : public IoError {
public:
    using IoError::IoError;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

} // namespace medt
