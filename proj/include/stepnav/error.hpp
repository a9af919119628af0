#pragma once

#include <stdexcept>
#include <string>

namespace stepnav {

// Failure categories; the numeric values double as CLI exit codes.
enum class ErrorKind : int {
  config = 2,
  data = 3,
  numeric = 4,
  insufficient_data = 5,
};

class Error : public std::runtime_error {
public:
  Error(ErrorKind kind, const std::string &what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }
  int exit_code() const noexcept { return static_cast<int>(kind_); }

private:
  ErrorKind kind_;
};

class ConfigError : public Error {
public:
  explicit ConfigError(const std::string &what) : Error(ErrorKind::config, what) {}
};

class DataError : public Error {
public:
  explicit DataError(const std::string &what) : Error(ErrorKind::data, what) {}
};

class NumericError : public Error {
public:
  explicit NumericError(const std::string &what)
      : Error(ErrorKind::numeric, what) {}
};

class InsufficientDataError : public Error {
public:
  explicit InsufficientDataError(const std::string &what)
      : Error(ErrorKind::insufficient_data, what) {}
};

} // namespace stepnav
