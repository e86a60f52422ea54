#pragma once

#include <stdexcept>
#include <string>

namespace evolve {

// Shapes that cannot be combined by an op.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Lookup id outside of its table.
class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Sequence longer than a configured budget.
class LengthError : public std::length_error {
 public:
  using std::length_error::length_error;
};

// Caller broke a documented precondition.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed or inconsistent input data (dataset files, records).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN / Inf encountered, or training diverged.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A metric that has no defined value for the given input.
class MetricUndefinedError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class NotFoundError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace evolve
