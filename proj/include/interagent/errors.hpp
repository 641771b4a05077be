#pragma once

#include <stdexcept>
#include <string>

namespace interagent {

// Error taxonomy shared by all modules. Everything derives from
// std::runtime_error so callers can catch broadly at the CLI boundary.

struct DimensionError : std::runtime_error {
  explicit DimensionError(const std::string& what) : std::runtime_error(what) {}
};

struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& what) : std::runtime_error(what) {}
};

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

struct DataError : std::runtime_error {
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

struct SimFault : std::runtime_error {
  explicit SimFault(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace interagent
