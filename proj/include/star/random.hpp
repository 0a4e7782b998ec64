// Deterministic, splittable random streams.
//
// Every stochastic choice in the project draws from an Rng derived from
// (seed, stream path). Identical (seed, stream, draw index) gives identical
// values on every run and platform, which is what makes seeded pipelines
// byte-reproducible.
#pragma once

#include <cmath>
#include <cstdint>

namespace star {

namespace detail {
inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}
inline uint64_t mix_key(uint64_t seed, uint64_t stream) {
  uint64_t s = seed ^ (0x9e3779b97f4a7c15ULL + (stream << 1));
  // Two rounds decorrelate adjacent stream ids.
  detail::splitmix64(s);
  detail::splitmix64(s);
  return s;
}
}  // namespace detail

class Rng {
 public:
  Rng() : state_(0x853c49e6748fea9bULL) {}
  explicit Rng(uint64_t seed) : state_(detail::mix_key(seed, 0)) {}
  Rng(uint64_t seed, uint64_t stream) : state_(detail::mix_key(seed, stream)) {}

  // Derives an independent stream without disturbing this one.
  Rng split(uint64_t stream) const {
    Rng r;
    r.state_ = detail::mix_key(state_, stream ^ 0xd1b54a32d192ed03ULL);
    return r;
  }

  uint64_t next_u64() { return detail::splitmix64(state_); }

  uint32_t next_u32() { return static_cast<uint32_t>(next_u64() >> 32); }

  // Uniform in [0, n).
  uint64_t next_below(uint64_t n) { return n ? next_u64() % n : 0; }

  // Uniform in [0, 1).
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

  // Standard normal via Box-Muller; one value per call keeps the draw
  // index bookkeeping trivial.
  double normal() {
    double u1 = next_unit();
    double u2 = next_unit();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  uint64_t state_;
};

}  // namespace star
