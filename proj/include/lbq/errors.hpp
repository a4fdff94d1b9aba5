#pragma once

#include <stdexcept>
#include <string>

namespace lbq {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A precondition of an operation was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// A computation produced or received a non-finite value.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A pipeline command was run before the stage it depends on.
class StageOrderError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint bytes failed validation (magic, version, truncation, CRC).
class FormatError : public IoError {
 public:
  using IoError::IoError;
};

/// Training loss diverged; carries the layer at which it happened.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, int layer)
      : Error(what), layer_(layer) {}
  int layer() const noexcept { return layer_; }

 private:
  int layer_;
};

}  // namespace lbq
