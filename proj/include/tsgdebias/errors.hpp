#pragma once

#include <stdexcept>
#include <string>

namespace tsgdb {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed text input (manifest line, JSON header, config file).
class ParseError : public Error {
 public:
  using Error::Error;
};

/// A record that parsed but violates a data invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Binary layout problems: bad magic, truncated payload, dimension mismatch.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Invalid generator spec or run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Operation called on the wrong kind of input (e.g. augmenting a test split).
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint written by an incompatible format version.
class VersionError : public Error {
 public:
  using Error::Error;
};

/// Predictions and ground truths that cannot be scored together.
class EvaluationError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values met during optimization.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace tsgdb
