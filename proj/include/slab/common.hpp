#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace slab {

// Error taxonomy. Everything user-facing derives from Error so callers can
// distinguish library failures from std:: internals.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeMismatch : Error { using Error::Error; };
struct EmptyReduction : Error { using Error::Error; };
struct NotScalar : Error { using Error::Error; };
struct InvalidKernel : Error { using Error::Error; };
struct BatchTooSmall : Error { using Error::Error; };
struct GridMismatch : Error { using Error::Error; };
struct NotConverged : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
struct CorruptCheckpoint : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct InsufficientPoints : Error { using Error::Error; };
struct NonPositiveLatency : Error { using Error::Error; };
struct EmptyStream : Error { using Error::Error; };
struct DivergedLoss : Error { using Error::Error; };

using Shape = std::vector<int>;

inline size_t numel_of(const Shape& s) {
  size_t n = 1;
  for (int e : s) n *= static_cast<size_t>(e);
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Forward-pass mode. `recalib` runs batch-norm layers in statistics-update
// mode while everything stochastic (droppath) behaves as in eval.
enum class Mode { train, eval, recalib };

}  // namespace slab
