#pragma once

#include <stdexcept>
#include <string>

namespace mdkto {

// Argument outside the mathematical domain of an operation (t > 1, l = 0, ...).
struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

// Inconsistent shapes or settings (block length, vocab mismatch, missing keys).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Violated caller contract (empty batch, misaligned records, stale cache).
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// Training hit a non-finite loss or gradient.
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace mdkto
