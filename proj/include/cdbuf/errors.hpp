#pragma once

#include <stdexcept>
#include <string>

namespace cdbuf {

// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Dimension/rank mismatches. Messages name the offending axes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration (bad hyperparameters, layer mismatches, empty inputs).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Numerical failures: NaN losses, degenerate batches, training divergence.
class NumericError : public Error {
 public:
  using Error::Error;
};

// File I/O and format errors.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace cdbuf
