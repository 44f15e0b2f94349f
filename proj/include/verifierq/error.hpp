#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace verifierq {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid construction parameters (sizes, ranges).
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// A precondition of an operation was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// An enumeration or allocation would exceed a configured cap.
class SizeError : public Error {
 public:
  using Error::Error;
};

/// Malformed input text. `line()` is 1-based; 0 when not line-oriented.
class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// Wrong file kind or version.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite value.
class DivergenceError : public Error {
 public:
  DivergenceError(std::int64_t step, const std::string& term)
      : Error("non-finite " + term + " at step " + std::to_string(step)),
        step_(step),
        term_(term) {}
  std::int64_t step() const { return step_; }
  const std::string& term() const { return term_; }

 private:
  std::int64_t step_;
  std::string term_;
};

}  // namespace verifierq
