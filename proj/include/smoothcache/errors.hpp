#pragma once

#include <stdexcept>
#include <string>

namespace smoothcache {

// Error hierarchy. The CLI maps these onto its exit-code contract:
// ConfigError/ValidationError -> 2, IoError -> 3, InvariantError -> 4.

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Raised when a numerically required reference norm is zero.
class DegenerateReferenceError : public Error {
 public:
  using Error::Error;
};

/// Plan/execution mismatch or any other "cannot happen" state.
class InvariantError : public Error {
 public:
  using Error::Error;
};

}  // namespace smoothcache
