#pragma once

#include <stdexcept>
#include <string>

namespace vtp {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand extents disagree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value (model, training, pruning rate, CLI config file).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Operation not valid for the current object state (e.g. hard forward on an unpruned model).
class StateError : public Error {
 public:
  using Error::Error;
};

/// Malformed or incompatible checkpoint file.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Bad input data (e.g. a class label out of range).
class InputError : public Error {
 public:
  using Error::Error;
};

/// API misuse (non-scalar loss, reused graph, incongruent optimizer state).
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace vtp
