#pragma once

#include <stdexcept>
#include <string>

namespace chunkssl {

// Error families. The CLI maps them onto exit codes:
// usage/config/capability -> 1, format -> 2, numeric -> 3.

struct UsageError : std::invalid_argument {
  explicit UsageError(const std::string& what) : std::invalid_argument(what) {}
};

// Shape mismatches and invalid configuration values.
struct ConfigError : UsageError {
  explicit ConfigError(const std::string& what) : UsageError(what) {}
};

// An operation was asked to do something it deliberately refuses (e.g. a
// full-vocabulary table beyond the size guard).
struct CapabilityError : UsageError {
  explicit CapabilityError(const std::string& what) : UsageError(what) {}
};

struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace chunkssl
