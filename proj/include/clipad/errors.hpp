#pragma once

#include <stdexcept>
#include <string>

namespace clipad {

/// Root of the library's exception hierarchy.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid user input or configuration. The CLI maps this family to exit code 1.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Tensor extents that do not fit together.
class DimensionError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// A requested key (prompt, tensor name) was not found.
class LookupError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// A metric is not defined for the given input (e.g. single-class AUROC).
class UndefinedMetricError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// Filesystem or codec failure. The CLI maps this family to exit code 2.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents.
class FormatError : public IoError {
 public:
  using IoError::IoError;
};

class BadMagicError : public FormatError {
 public:
  using FormatError::FormatError;
};

class TruncatedFileError : public FormatError {
 public:
  using FormatError::FormatError;
};

class MissingTensorError : public FormatError {
 public:
  MissingTensorError(const std::string& name)
      : FormatError("missing tensor '" + name + "'"), name_(name) {}
  const std::string& name() const noexcept { return name_; }

 private:
  std::string name_;
};

class ShapeMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

}  // namespace clipad
