#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace lhg {

enum class ErrorKind {
  InvalidInput,
  InvalidConfig,
  Training,
  DegenerateState,
  Model,
  Format,
  Io,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class InvalidInput : public Error {
 public:
  explicit InvalidInput(const std::string& message) : Error(ErrorKind::InvalidInput, message) {}
};

class InvalidConfig : public Error {
 public:
  explicit InvalidConfig(const std::string& message) : Error(ErrorKind::InvalidConfig, message) {}
};

class TrainingError : public Error {
 public:
  explicit TrainingError(const std::string& message) : Error(ErrorKind::Training, message) {}
};

/// Raised when a posterior denominator is zero, i.e. the observed x_t is
/// impossible under the forward chain for some x_0 carrying weight.
class DegenerateState : public Error {
 public:
  DegenerateState(const std::string& message, std::size_t position)
      : Error(ErrorKind::DegenerateState, message), position_(position) {}

  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

class ModelError : public Error {
 public:
  explicit ModelError(const std::string& message) : Error(ErrorKind::Model, message) {}
};

class FormatError : public Error {
 public:
  FormatError(const std::string& message, std::uint64_t offset)
      : Error(ErrorKind::Format, message + " (byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& message) : Error(ErrorKind::Io, message) {}
};

// CLI exit codes: 0 success, 1 usage/config, 2 data/format, 3 numerical.
inline int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidInput:
    case ErrorKind::InvalidConfig:
      return 1;
    case ErrorKind::Format:
    case ErrorKind::Io:
      return 2;
    case ErrorKind::Training:
    case ErrorKind::DegenerateState:
    case ErrorKind::Model:
      return 3;
  }
  return 1;
}

}  // namespace lhg
