#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace daefuse {

/// Failure categories. The CLI prints the category name verbatim, so keep
/// the strings below stable.
enum class ErrorKind {
  NotFound,
  UnsupportedFormat,
  InvalidImage,
  PairingError,
  RegistrationError,
  CropError,
  EmptyDataset,
  ShapeError,
  NumericalError,
  DegenerateInput,
  DomainError,
  PhaseOrderError,
  ConfigError,
  UsageError,
  IOError,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::NotFound: return "NotFound";
    case ErrorKind::UnsupportedFormat: return "UnsupportedFormat";
    case ErrorKind::InvalidImage: return "InvalidImage";
    case ErrorKind::PairingError: return "PairingError";
    case ErrorKind::RegistrationError: return "RegistrationError";
    case ErrorKind::CropError: return "CropError";
    case ErrorKind::EmptyDataset: return "EmptyDataset";
    case ErrorKind::ShapeError: return "ShapeError";
    case ErrorKind::NumericalError: return "NumericalError";
    case ErrorKind::DegenerateInput: return "DegenerateInput";
    case ErrorKind::DomainError: return "DomainError";
    case ErrorKind::PhaseOrderError: return "PhaseOrderError";
    case ErrorKind::ConfigError: return "ConfigError";
    case ErrorKind::UsageError: return "UsageError";
    case ErrorKind::IOError: return "IOError";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace daefuse
