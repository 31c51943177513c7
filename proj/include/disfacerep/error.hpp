#pragma once

#include <stdexcept>
#include <string>

namespace disfacerep {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed config file. line is 1-based, 0 when unknown.
class ConfigError : public Error {
 public:
  ConfigError(const std::string& what, int line)
      : Error(line > 0 ? "line " + std::to_string(line) + ": " + what : what),
        line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

// A value violates a documented invariant. field names the offender.
class ValidationError : public Error {
 public:
  ValidationError(std::string field, const std::string& what)
      : Error(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Missing or undecodable input data.
class DataError : public Error {
 public:
  using Error::Error;
};

// Failure talking to an external service (detector, VL encoder).
class ClientError : public Error {
 public:
  ClientError(const std::string& what, bool retryable)
      : Error(what), retryable_(retryable) {}
  bool retryable() const { return retryable_; }

 private:
  bool retryable_;
};

}  // namespace disfacerep
