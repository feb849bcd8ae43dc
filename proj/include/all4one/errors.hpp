#pragma once

#include <stdexcept>
#include <string>

namespace all4one {

// Violated precondition or API contract (wrong rank, N < 2, empty sequence...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Extents that do not line up.
class DimensionError : public ContractError {
 public:
  using ContractError::ContractError;
};

// NaN / Inf where a finite value is required, divergence.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Support set holds fewer entries than the requested neighbour count.
class InsufficientQueueError : public ContractError {
 public:
  using ContractError::ContractError;
};

// Retrieval metric requested on entries without labels.
class MetricUnavailableError : public ContractError {
 public:
  using ContractError::ContractError;
};

class ConfigError : public ContractError {
 public:
  using ContractError::ContractError;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace all4one
