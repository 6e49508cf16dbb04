#pragma once

#include <stdexcept>
#include <string>

namespace caft {

// Base class for every error raised by the library. Callers that only care
// about "something went wrong" catch this; the CLI maps subclasses onto exit
// codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not satisfy an op's contract.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A forward op produced NaN or Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

// A caller broke an API contract (wrong mode, neighbors at inference, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// A CTC target cannot be emitted in the available number of frames.
class InfeasibleTargetError : public Error {
 public:
  using Error::Error;
};

// Invalid (L, O) context window.
class InvalidWindowError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration value or config-file syntax.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// File I/O failures. Subclasses distinguish the failure modes so that tests
// and the CLI can tell a missing file from a corrupted one.
class IoError : public Error {
 public:
  using Error::Error;
};

class FormatError : public IoError {
 public:
  using IoError::IoError;
};

class TruncatedFileError : public IoError {
 public:
  using IoError::IoError;
};

class MissingFileError : public IoError {
 public:
  using IoError::IoError;
};

class ManifestError : public IoError {
 public:
  using IoError::IoError;
};

// Checkpoint task/dimensions do not match the data it is applied to.
class TaskMismatchError : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace caft
