#pragma once

#include <stdexcept>
#include <string>

namespace misra {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor extents do not agree with what an operation expects.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Image extents violate the divisible-by-8 requirement of the network.
class SizingError : public DimensionError {
public:
    using DimensionError::DimensionError;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

/// Caller broke an operation precondition (non-scalar backward, bad stage index, ...).
class ContractError : public Error {
public:
    using Error::Error;
};

/// Batch statistics cannot be formed, or a class never occurs in the data.
class DegenerateError : public Error {
public:
    using Error::Error;
};

class LabelError : public Error {
public:
    using Error::Error;
};

class DataError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

}  // namespace misra
