#pragma once

#include <stdexcept>
#include <string>

namespace dcar {

// Bad shapes, out-of-range indices, malformed inputs.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Incompatible or inconsistent configuration (maps to CLI exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// An object was driven through an illegal state transition.
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace dcar
