#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace qkt {

// Base for every error raised by the library. The CLI maps the concrete
// subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape disagreement between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A precondition the caller was responsible for was violated.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Non-finite values, degenerate reductions, undefined metrics.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration or incompatible artifacts.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed input files. Carries the 1-based line number when known (0 otherwise).
class DataError : public Error {
 public:
  DataError(const std::string& what, std::size_t line = 0)
      : Error(line == 0 ? what : "line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

}  // namespace qkt
