#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace dbk {

// Error categories used across the library. All derive from std::runtime_error
// so CLI code can catch one type; the distinct classes exist for tests and for
// callers that want to react differently.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

struct FlowEstimationError : std::runtime_error {
  explicit FlowEstimationError(const std::string& msg) : std::runtime_error(msg) {}
};

// FNV-1a, used for stable config hashes.
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// Mixes a base seed with stream identifiers (epoch, step, ...) so every
// consumer of randomness can be re-derived from the config seed alone.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0) {
  std::uint64_t h = base ^ 0x9e3779b97f4a7c15ull;
  auto mix = [&h](std::uint64_t v) {
    h ^= v + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    h *= 0xff51afd7ed558ccdull;
    h ^= h >> 33;
  };
  mix(a);
  mix(b);
  return h;
}

}  // namespace dbk
