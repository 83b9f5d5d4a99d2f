#pragma once

#include <stdexcept>
#include <string>

namespace avk {

/// Base of every library error. Subclasses map onto CLI exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Caller passed something outside the documented contract (exit code 1).
class InvalidArgument : public Error {
public:
    using Error::Error;
};

/// Non-finite values or divergence (exit code 2).
class NumericError : public Error {
public:
    using Error::Error;
};

class DegenerateGeometry : public NumericError {
public:
    using NumericError::NumericError;
};

/// A VJP was called with state that no longer matches its forward pass.
class StaleState : public InvalidArgument {
public:
    using InvalidArgument::InvalidArgument;
};

/// A pluggable component violated its interface contract.
class ContractViolation : public InvalidArgument {
public:
    using InvalidArgument::InvalidArgument;
};

class IoError : public InvalidArgument {
public:
    using InvalidArgument::InvalidArgument;
};

}  // namespace avk
