#pragma once

#include <stdexcept>
#include <string>

namespace lfyolo {

/// Base of every error raised by the library. The CLI maps subclasses to
/// exit codes (validation = 1, I/O = 2, anything else = 3).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Validation-class errors.
class ShapeError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class ParseError : public Error { using Error::Error; };
class ValidationError : public Error { using Error::Error; };

// Broken caller contract (non-scalar loss, non-deterministic fn, ...).
class ContractError : public Error { using Error::Error; };

// Non-finite values where finite ones are required.
class NumericError : public Error { using Error::Error; };

// I/O-class errors.
class IoError : public Error { using Error::Error; };
class FormatError : public IoError { using IoError::IoError; };
class WeightsError : public IoError { using IoError::IoError; };

}  // namespace lfyolo
