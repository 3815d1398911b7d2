#pragma once

#include <cmath>
#include <cstdint>

namespace gatedformer {

// Keyed counter-based generator (splitmix64 finalizer over a mixed key).
// Every draw is a pure function of its key tuple, so unrelated consumers
// cannot perturb each other's streams.
namespace rng {

inline uint64_t mix64(uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline uint64_t hash4(uint64_t a, uint64_t b, uint64_t c, uint64_t d) {
  uint64_t h = mix64(a);
  h = mix64(h ^ 0x517cc1b727220a95ULL ^ b);
  h = mix64(h ^ 0x2545f4914f6cdd1dULL ^ c);
  h = mix64(h ^ 0x9e3779b97f4a7c15ULL ^ d);
  return h;
}

// Uniform in [0,1) with 53 random mantissa bits.
inline double uniform01(uint64_t a, uint64_t b, uint64_t c, uint64_t d) {
  return static_cast<double>(hash4(a, b, c, d) >> 11) * 0x1.0p-53;
}

}  // namespace rng

// Sequential stream for parameter initialization. Hand-rolled distributions
// keep draws identical across standard libraries and platforms.
class InitRng {
 public:
  explicit InitRng(uint64_t seed) : state_(rng::mix64(seed ^ 0x8f1bbcdcbfa53e0bULL)) {}

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    return rng::mix64(state_);
  }

  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Box-Muller; consumes two uniforms per draw, no cached spare.
  double gaussian(double sigma) {
    double u1 = uniform01();
    double u2 = uniform01();
    if (u1 < 1e-300) u1 = 1e-300;
    return sigma * std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

 private:
  uint64_t state_;
};

}  // namespace gatedformer
