#pragma once

#include <cmath>
#include <cstdint>

namespace rudd {

// Counter-based generator: each draw is splitmix64 of (seed, counter), so
// streams are stateless, splittable, and identical across platforms. All
// data-generation and fixture-feeding randomness goes through this.
class Rng {
 public:
  explicit Rng(uint64_t seed, uint64_t stream = 0) : seed_(seed ^ (stream * 0x9e3779b97f4a7c15ULL)) {}

  uint64_t next_u64() { return mix(seed_ + (++counter_) * 0x9e3779b97f4a7c15ULL); }

  // uniform in [0, 1)
  double next_double() { return double(next_u64() >> 11) * (1.0 / 9007199254740992.0); }

  // uniform in [lo, hi)
  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // uniform integer in [0, n)
  uint64_t next_below(uint64_t n) { return next_u64() % n; }

  double normal(double mean = 0.0, double stddev = 1.0) {
    // Box-Muller; draws two uniforms per call
    double u1 = next_double(), u2 = next_double();
    while (u1 <= 1e-300) u1 = next_double();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(6.283185307179586 * u2);
  }

  Rng split(uint64_t stream) const { return Rng(mix(seed_ ^ mix(stream)), 0); }

 private:
  uint64_t seed_;
  uint64_t counter_ = 0;

  static uint64_t mix(uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
};

}  // namespace rudd
