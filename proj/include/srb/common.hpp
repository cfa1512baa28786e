#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace srb {

using Real = double;

// Error taxonomy. Every validation failure maps onto one of these so callers
// (and the CLI) can translate them into exit codes uniformly.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InvalidInputError : Error {
  using Error::Error;
};

struct ContractError : Error {
  using Error::Error;
};

struct NotFoundError : Error {
  using Error::Error;
};

struct IncompatibleCheckpointError : Error {
  using Error::Error;
};

struct InvalidBudgetError : Error {
  using Error::Error;
};

// Config validation failure; carries the offending field path.
struct ConfigError : InvalidInputError {
  ConfigError(const std::string& field, const std::string& what)
      : InvalidInputError("config field '" + field + "': " + what), field_path(field) {}
  std::string field_path;
};

struct IoError : Error {
  using Error::Error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw InvalidInputError(msg);
}

}  // namespace srb
