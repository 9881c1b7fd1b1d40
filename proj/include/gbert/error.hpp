#pragma once

#include <stdexcept>
#include <string>

namespace gbert {

/// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Raised when user-supplied input (files, configs, flags) is invalid.
/// The CLI maps this to exit code 2.
class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what) : Error(what) {}
};

/// Raised when tensor shapes are incompatible with a requested operation.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(what) {}
};

}  // namespace gbert
