#pragma once

#include <stdexcept>
#include <string>

namespace deaot {

// Shapes or sizes that do not line up.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Invalid configuration values (even kernel sizes, unknown keys, ...).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A precondition on call order or state was violated.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Object index outside the range of the identification bank.
class IdentityError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// NaN/Inf where finite values were required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// File format or filesystem failures.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace deaot
