#pragma once

#include <stdexcept>
#include <string>

namespace lmrt {

// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad arguments, malformed input data, violated preconditions.
class InputError : public Error {
 public:
  explicit InputError(const std::string& msg) : Error(msg) {}
};

// Misuse of an API contract (wrong model for a state, non-nested LRT, ...).
class UsageError : public Error {
 public:
  explicit UsageError(const std::string& msg) : Error(msg) {}
};

// Non-finite values, divergence, undefined statistics.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

// Structured-file problems; carries the 1-based line number when known.
class ParseError : public Error {
 public:
  ParseError(const std::string& msg, long line)
      : Error(line > 0 ? msg + " (line " + std::to_string(line) + ")" : msg),
        line_(line) {}
  long line() const { return line_; }

 private:
  long line_;
};

}  // namespace lmrt
