#pragma once

#include <stdexcept>
#include <string>

namespace qkdbound {

// Base of every error thrown by the library. The CLI maps the concrete type
// to the "kind" field of its error record.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A precondition on an argument failed (dimension, subset, probability, ...).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// A query fell outside a tabulated domain. Never extrapolated.
class OutOfRange : public Error {
 public:
  using Error::Error;
};

// A quantity is mathematically undefined for the given input, e.g. a
// single-photon error rate when the single-photon yield estimate is zero.
class UndefinedQuantity : public Error {
 public:
  using Error::Error;
};

// Malformed input document (measured statistics, curve cache, config).
class ParseError : public Error {
 public:
  using Error::Error;
};

}  // namespace qkdbound
