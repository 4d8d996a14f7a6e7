#pragma once

#include <stdexcept>
#include <string>

namespace ragopt {

// Base of every error raised by the library. The CLI maps ValidationError and
// ParseError to exit code 2 and everything else to exit code 3.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ParseError : public Error {
public:
    using Error::Error;
};

class ValidationError : public Error {
public:
    using Error::Error;
};

class DimensionMismatch : public Error {
public:
    using Error::Error;
};

class ZeroVector : public Error {
public:
    using Error::Error;
};

class BatchTooSmall : public Error {
public:
    using Error::Error;
};

class InsufficientData : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class EmptyCorpus : public Error {
public:
    using Error::Error;
};

class MissingPolicyAction : public Error {
public:
    using Error::Error;
};

class EmptyBatch : public Error {
public:
    using Error::Error;
};

class MissingRating : public Error {
public:
    using Error::Error;
};

class UnexpectedRating : public Error {
public:
    using Error::Error;
};

}  // namespace ragopt
