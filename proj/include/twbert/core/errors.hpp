#pragma once

#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace twbert {

using Shape = std::vector<std::size_t>;

/// Raised when tensor shapes or widths do not line up.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Raised when a documented precondition of an operation is violated.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

/// Raised on NaN/Inf values and other numeric failures.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed or corrupted files (checkpoints, exports, vocabularies).
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Invalid run configuration.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

}  // namespace twbert
