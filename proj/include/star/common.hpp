// Shared error types and shape helpers.
#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace star {

using Shape = std::vector<int>;

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Operand shapes do not conform.
struct DimensionError : Error {
  using Error::Error;
};

// A discrete id lies outside its declared range.
struct IndexError : Error {
  using Error::Error;
};

// A configuration value violates its invariants.
struct ConfigError : Error {
  using Error::Error;
};

// A caller broke an operation's documented precondition.
struct ContractError : Error {
  using Error::Error;
};

// A statistic was requested over an empty window.
struct StatError : Error {
  using Error::Error;
};

// Stored data failed a hash or framing check.
struct IntegrityError : Error {
  using Error::Error;
};

// A sequence exceeds the model's capacity.
struct CapacityError : Error {
  using Error::Error;
};

// A training step could not be applied (non-finite gradients and the like).
struct TrainingAbort : Error {
  using Error::Error;
};

inline long long shape_numel(const Shape& s) {
  long long n = 1;
  for (int d : s) {
    if (d < 0) throw DimensionError("negative extent in shape");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

}  // namespace star
