#pragma once

#include <stdexcept>
#include <string>

namespace rdd {

// Invalid shapes, invalid configuration values, incompatible operands.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// API misuse: non-scalar backward, backward without re-recording, etc.
struct UsageError : std::logic_error {
  using std::logic_error::logic_error;
};

// A documented inter-module precondition was violated at runtime.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// File IO and on-disk format problems.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Scene generation could not satisfy its constraints.
struct GenerationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Training diverged or missed a configured quality floor.
struct TrainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace rdd
