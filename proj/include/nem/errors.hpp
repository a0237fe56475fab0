#pragma once

#include <stdexcept>
#include <string>

namespace nem {

// Shape or extent mismatch between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Unknown enum spelling, invalid option combination, missing key.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed or truncated file (IDX, NEMD, NEMC, config).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// File could not be opened, read or written.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// API misuse such as calling backward on a non-scalar.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// NaN/Inf surfaced in a loss, gradient or prediction.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A score that has no value for the given input (e.g. AMI over zero pixels).
class UndefinedScoreError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

}  // namespace nem
