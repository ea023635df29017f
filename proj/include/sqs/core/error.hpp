#pragma once

#include <stdexcept>
#include <string>

namespace sqs {

// Base of every exception thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

// NaN/Inf produced by a computation.
class NumericError : public Error {
public:
    using Error::Error;
};

// Malformed, truncated, or mismatched file content.
class FormatError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

// Precondition violated by the caller.
class InvalidArgument : public Error {
public:
    using Error::Error;
};

} // namespace sqs
