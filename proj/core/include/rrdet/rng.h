#pragma once

#include <cstdint>

namespace rrdet {

/// Counter-based splitmix64 generator. One 64-bit word of state, cheap to
/// fork into independent streams, and bit-reproducible across platforms
/// (normal() uses an internal Box-Muller rather than std::normal_distribution,
/// whose output is implementation-defined).
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64();
  double uniform();                         // [0, 1)
  double uniform(double lo, double hi);     // [lo, hi)
  int64_t uniform_int(int64_t lo, int64_t hi);  // inclusive bounds
  double normal();                          // standard normal

  /// Derives an independent stream; the parent stream is not advanced.
  Rng fork(uint64_t stream) const { return Rng(mix(state_, stream)); }

  uint64_t state() const { return state_; }
  void set_state(uint64_t s) { state_ = s; }

  static uint64_t mix(uint64_t a, uint64_t b);

 private:
  uint64_t state_;
};

}  // namespace rrdet
