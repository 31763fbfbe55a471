#pragma once

#include <stdexcept>
#include <string>

namespace anyi2v {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bad user input: malformed files, invalid configuration, shape violations.
class InputError : public Error {
public:
    using Error::Error;
};

class ShapeError : public InputError {
public:
    using InputError::InputError;
};

/// A NaN/Inf was produced, or an optimization diverged.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Rethrows the in-flight exception with `context` prepended, keeping its category.
[[noreturn]] void rethrow_with_context(const std::string& context);

}  // namespace anyi2v
