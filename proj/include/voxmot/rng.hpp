#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace voxmot {

// splitmix64; used both as a generator step and to hash stream names.
inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d4ecda9f87915full;
  return z ^ (z >> 31);
}

inline uint64_t hash_combine(uint64_t seed, uint64_t v) {
  uint64_t s = seed + 0x632be59bd9b4e019ull;
  uint64_t a = splitmix64(s);
  s = a ^ v;
  return splitmix64(s);
}

inline uint64_t hash_name(std::string_view name) {
  // FNV-1a
  uint64_t h = 1469598103934665603ull;
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

// Deterministic generator with a fully specified update rule, so results
// are bit-identical across platforms and standard-library versions.
// Distributions are hand-rolled for the same reason.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed ^ 0x5851f42d4c957f2dull) {
    // decorrelate trivially related seeds
    next_u64();
    next_u64();
  }

  uint64_t next_u64() { return splitmix64(state_); }

  // uniform in [0, 1)
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // uniform integer in [0, n)
  uint64_t uniform_int(uint64_t n) {
    // modulo bias is negligible for the small n used here
    return n ? next_u64() % n : 0;
  }

  // integer in [lo, hi] inclusive
  int64_t uniform_range(int64_t lo, int64_t hi) {
    return lo + static_cast<int64_t>(uniform_int(static_cast<uint64_t>(hi - lo + 1)));
  }

  // standard normal via Box-Muller (no cached spare: keeps the stream
  // position a pure function of the number of draws)
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

 private:
  uint64_t state_;
};

// Named stream derivation: every source of randomness in the system is a
// pure function of (base seed, stream name, step index).
inline Rng stream_rng(uint64_t seed, std::string_view stream, uint64_t step = 0) {
  return Rng(hash_combine(hash_combine(seed, hash_name(stream)), step));
}

}  // namespace voxmot
