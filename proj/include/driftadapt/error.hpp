#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace driftadapt {

// Machine-readable failure categories; the CLI maps each one to an exit code.
enum class ErrorCategory {
  input,       // malformed arguments to an operation
  validation,  // dataset / precondition checks
  config,      // inconsistent configuration
  io,          // filesystem and archive problems
  numeric,     // non-finite values where finite ones are required
};

std::string_view to_string(ErrorCategory category);
int exit_code(ErrorCategory category);

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& message)
      : std::runtime_error(message), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

class InputError : public Error {
 public:
  explicit InputError(const std::string& message) : Error(ErrorCategory::input, message) {}
};

class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& message)
      : Error(ErrorCategory::validation, message) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& message) : Error(ErrorCategory::config, message) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& message) : Error(ErrorCategory::io, message) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& message) : Error(ErrorCategory::numeric, message) {}
};

}  // namespace driftadapt
