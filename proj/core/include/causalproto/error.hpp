#pragma once

#include <stdexcept>
#include <string>

namespace causalproto {

/// Violated precondition of a public operation (empty batch, dimension mismatch, ...).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Invalid configuration value or combination of values.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite values surfaced by a numeric routine.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File system or encoding failure; the message always carries the path.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed text input; the message carries the file and line number.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& file, std::size_t line, const std::string& what)
      : std::runtime_error(file + ":" + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

#define CAUSALPROTO_REQUIRE(cond, msg)                  \
  do {                                                  \
    if (!(cond)) throw ::causalproto::ContractViolation(msg); \
  } while (0)

}  // namespace causalproto
