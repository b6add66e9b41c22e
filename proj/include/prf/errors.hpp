#pragma once

#include <stdexcept>
#include <string>

namespace prf {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape disagreement between tensor operands.
struct DimensionError : Error {
  using Error::Error;
};

// A documented precondition was violated by the caller.
struct ContractError : Error {
  using Error::Error;
};

// A softmax row (or attention group) has no unmasked entry.
struct DegenerateRowError : Error {
  using Error::Error;
};

// Non-finite values appeared during integration or training.
struct DivergenceError : Error {
  using Error::Error;
};

// Malformed binary/text artifact; carries the byte offset of the defect.
struct FormatError : Error {
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset(offset) {}
  std::size_t offset;
};

struct ConfigError : Error {
  using Error::Error;
};

}  // namespace prf
