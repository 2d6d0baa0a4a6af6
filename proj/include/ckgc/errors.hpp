#pragma once

#include <stdexcept>
#include <string>

namespace ckgc {

// Error taxonomy mirrors the CLI exit codes: config/usage errors exit 1,
// data-integrity errors exit 2, numeric failures exit 3.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace ckgc
