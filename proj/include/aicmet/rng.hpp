#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>

namespace aicmet {

inline uint64_t splitmix64(uint64_t& x) {
  x += 0x9e3779b97f4a7c15ULL;
  uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// xoshiro256++ with splitmix64 seeding. Hand-rolled so that every stream is
// bit-reproducible across platforms and standard-library versions.
class Rng {
 public:
  Rng() : Rng(0) {}

  explicit Rng(uint64_t seed) {
    uint64_t x = seed;
    for (auto& w : s_) w = splitmix64(x);
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform on [0, 1), 53-bit resolution.
  double u01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform on (0, 1]; safe for log().
  double u01_pos() { return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53; }

  double uniform(double a, double b) { return a + (b - a) * u01(); }

  // Box-Muller, cosine branch only; no cached spare so the state is just s_.
  double normal() {
    const double u1 = u01_pos();
    const double u2 = u01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double sd) { return mean + sd * normal(); }

  // Integer in [lo, hi] inclusive, by rejection.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    const uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    uint64_t r;
    do {
      r = next_u64();
    } while (r >= limit);
    return lo + static_cast<int64_t>(r % span);
  }

  bool bernoulli(double p) { return u01() < p; }

  std::array<uint64_t, 4> state() const { return s_; }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  std::array<uint64_t, 4> s_{};
};

// Derives an independent child stream from a seed and a tag path, e.g.
// derive_rng(seed, {kStreamSim, study_index}).
inline Rng derive_rng(uint64_t seed, std::initializer_list<uint64_t> tags) {
  uint64_t x = seed;
  uint64_t acc = splitmix64(x);
  for (uint64_t t : tags) {
    x ^= t + 0x9e3779b97f4a7c15ULL + (acc << 6) + (acc >> 2);
    acc = splitmix64(x);
  }
  return Rng(acc);
}

// Stream tags used across the workbench; one namespace per consumer keeps
// study generation, training noise and evaluation draws independent.
inline constexpr uint64_t kStreamSim = 0x51;
inline constexpr uint64_t kStreamInit = 0x11;
inline constexpr uint64_t kStreamStep = 0x7a;
inline constexpr uint64_t kStreamEval = 0xe0;

}  // namespace aicmet
