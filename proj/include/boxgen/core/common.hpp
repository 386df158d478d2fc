#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace boxgen {

inline constexpr double kPi = 3.141592653589793238462643383279502884;

// Error taxonomy. Validation/config errors map to CLI exit code 1,
// everything else derived from RuntimeError maps to exit code 2.
struct ValidationError : std::runtime_error {
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : ValidationError {
  explicit ConfigError(const std::string& msg) : ValidationError(msg) {}
};

struct CapacityError : ValidationError {
  explicit CapacityError(const std::string& msg) : ValidationError(msg) {}
};

struct RuntimeFailure : std::runtime_error {
  explicit RuntimeFailure(const std::string& msg) : std::runtime_error(msg) {}
};

struct StateError : RuntimeFailure {
  explicit StateError(const std::string& msg) : RuntimeFailure(msg) {}
};

struct GenerationError : RuntimeFailure {
  explicit GenerationError(const std::string& msg) : RuntimeFailure(msg) {}
};

struct TrainingError : RuntimeFailure {
  explicit TrainingError(const std::string& msg) : RuntimeFailure(msg) {}
};

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw ValidationError(msg);
}

// FNV-1a 64-bit, used for artifact identity hashes in reports.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 14695981039346656037ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(uint64_t h) {
  static const char* d = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[i] = d[h & 0xf];
    h >>= 4;
  }
  return s;
}

}  // namespace boxgen
