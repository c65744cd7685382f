#pragma once

#include <stdexcept>
#include <string>

namespace nestedflow {

// Invalid configuration or argument values detected before any work starts.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Numerical failure mid-computation (non-finite state, divergence).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or truncated on-disk artifacts.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace nestedflow
