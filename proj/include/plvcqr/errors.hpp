#pragma once

#include <stdexcept>
#include <string>

namespace plvcqr {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Input and data errors. The CLI maps these to exit code 2.
class DataError : public Error {
 public:
  using Error::Error;
};

class SchemaError : public DataError {
 public:
  using DataError::DataError;
};

class ParseError : public DataError {
 public:
  ParseError(const std::string& what, std::size_t row)
      : DataError(what), row_(row) {}
  /// 1-based line number in the source file (header is line 1).
  std::size_t row() const noexcept { return row_; }

 private:
  std::size_t row_;
};

class EmptyInputError : public DataError {
 public:
  using DataError::DataError;
};

class EmptyWindowError : public DataError {
 public:
  using DataError::DataError;
};

class NoPairsError : public DataError {
 public:
  using DataError::DataError;
};

// Caller contract violations.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

class DomainError : public ArgumentError {
 public:
  using ArgumentError::ArgumentError;
};

class DimensionError : public ArgumentError {
 public:
  using ArgumentError::ArgumentError;
};

class ExtrapolationError : public ArgumentError {
 public:
  using ArgumentError::ArgumentError;
};

// Numerical failures. The CLI maps these to exit code 3.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class DegenerateKnotsError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class IllConditionedError : public NumericalError {
 public:
  IllConditionedError(const std::string& what, double condition)
      : NumericalError(what), condition_(condition) {}
  double condition() const noexcept { return condition_; }

 private:
  double condition_;
};

class DegenerateDesignError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class SolverError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

}  // namespace plvcqr
