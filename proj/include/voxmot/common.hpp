#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace voxmot {

// Error taxonomy. Each failure mode gets its own type so callers (and the
// CLI exit-code mapping) can distinguish them.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct BoundsError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct EmptyAssetError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct GenerationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct BlockTableError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct PackError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct GradientError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ReproducibilityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

}  // namespace voxmot
