#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace selpred {

/// Base class for all toolkit errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape mismatch or too few rows/columns for an operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values or numeric breakdown at runtime.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss. Carries the epoch it happened at.
class DivergenceError : public NumericError {
 public:
  DivergenceError(const std::string& what, std::size_t epoch)
      : NumericError(what), epoch_(epoch) {}
  std::size_t epoch() const { return epoch_; }

 private:
  std::size_t epoch_;
};

/// Caller passed invalid arguments (bad flag value, unknown identifier, ...).
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Input data failed validation (inconsistent sizes, out-of-range labels, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file. line() is 1-based; 0 means "not line-specific".
class ParseError : public ValidationError {
 public:
  ParseError(const std::string& what, std::size_t line = 0)
      : ValidationError(line > 0 ? what + " (line " + std::to_string(line) + ")"
                                 : what),
        line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

}  // namespace selpred
