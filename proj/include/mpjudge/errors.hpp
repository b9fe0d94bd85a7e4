#pragma once

#include <stdexcept>
#include <string>

namespace mpjudge {

// Base for every error this library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor extents that do not fit the operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A documented precondition was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Malformed or unsupported file content (audio, image, manifest).
class FormatError : public Error {
 public:
  using Error::Error;
};

// Checkpoint problems: bad magic, version, truncation, mismatched tensors.
class CheckpointError : public Error {
 public:
  using Error::Error;
};

// Numerical failure such as a non-finite loss or objective value.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace mpjudge
