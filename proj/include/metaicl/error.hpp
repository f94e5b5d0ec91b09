#pragma once

#include <stdexcept>
#include <string>

namespace metaicl {

// Root of every error the library throws. The CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration or violated precondition (exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or inconsistent input data (exit code 2).
class DataError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf in activations or loss (exit code 3).
class NumericalError : public Error {
 public:
  using Error::Error;
};

// Unreadable/unwritable files (exit code 4).
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace metaicl
