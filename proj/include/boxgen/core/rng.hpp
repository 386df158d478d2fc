#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace boxgen {

// Deterministic RNG. The engine is std::mt19937_64 (bit-exact by the
// standard); the uniform/normal transforms are implemented here rather
// than via std::*_distribution so that streams are pinned by this code
// alone.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Integer in [lo, hi] inclusive.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    return lo + static_cast<int64_t>(uniform() * static_cast<double>(hi - lo + 1));
  }

  // Standard normal via Box-Muller, second value cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // Derive an independent stream keyed by salt; independent of how much
  // of this stream has been consumed.
  Rng fork(uint64_t salt) const {
    uint64_t s = seed_ * 0x94d049bb133111ebull;
    s ^= 0x9e3779b97f4a7c15ull + salt * 0xbf58476d1ce4e5b9ull + (s << 6) + (s >> 2);
    return Rng(s);
  }

 private:
  uint64_t seed_;
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace boxgen
