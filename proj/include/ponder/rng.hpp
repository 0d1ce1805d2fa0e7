#pragma once

#include <cmath>
#include <cstdint>

namespace ponder {

// Counter-based deterministic random stream (SplitMix64). Identical seed and
// call sequence give identical outputs on every platform.
class RngStream {
 public:
  explicit RngStream(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double next_double() { return (next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, bound). Rejection-free modulo is fine at this scale;
  // bound is tiny relative to 2^64 so the bias is negligible and deterministic.
  uint64_t next_below(uint64_t bound) { return next_u64() % bound; }

  bool bernoulli(double p) { return next_double() < p; }

  // Standard normal via Box-Muller; consumes two uniforms per call.
  double next_gaussian() {
    double u1 = next_double();
    double u2 = next_double();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.141592653589793 * u2);
  }

  // Deterministically derive an independent stream, e.g. per example.
  static RngStream derive(uint64_t seed, uint64_t stream_id) {
    RngStream mix(seed ^ (0x517cc1b727220a95ULL * (stream_id + 1)));
    return RngStream(mix.next_u64());
  }

 private:
  uint64_t state_;
};

}  // namespace ponder
