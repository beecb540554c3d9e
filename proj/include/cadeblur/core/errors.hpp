#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cadeblur {

/// Base class of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible with the requested operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A configuration value violates a documented constraint (even kernel size,
/// indivisible image size, missing cross-attention source, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// The requested problem does not fit the memory guard of an operator.
class CapacityError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf encountered where finite values are required.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file. Carries the byte offset at which parsing failed.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace cadeblur
