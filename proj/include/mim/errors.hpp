#pragma once

#include <stdexcept>
#include <string>

namespace mim {

// Shape or dimension mismatch between operands.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Token id or row index outside its valid range.
struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

// Caller violated a documented precondition.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// NaN or Inf produced by a kernel.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Sequence would exceed the model context.
struct LengthError : std::length_error {
  using std::length_error::length_error;
};

// Forward/backward streams do not line up.
struct AlignmentError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace mim
