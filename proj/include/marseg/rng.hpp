// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace marseg {

// splitmix64; used to derive stream seeds so that e.g. per-frame noise and
// per-scene sampling are independent of each other's draw counts.
inline uint64_t mix_seed(uint64_t seed, uint64_t salt) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// mt19937_64 with hand-rolled distributions. The standard distributions are
// implementation-defined, which would tie generated datasets to one libstdc++
// version; these mappings are fixed.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next() { return eng_(); }

  // [0, 1)
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [lo, hi] inclusive
  int uniform_int(int lo, int hi) {
    const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    // Lemire multiply-shift; bias is < 2^-64 per draw.
    const unsigned __int128 m =
        static_cast<unsigned __int128>(eng_()) * span;
    return lo + static_cast<int>(static_cast<uint64_t>(m >> 64));
  }

  // Box-Muller, two uniforms per draw, no cached spare.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // Normal clipped to +-3 sigma; keeps geometry bounds exact.
  double truncated_normal(double sigma) {
    double v = normal();
    if (v > 3.0) v = 3.0;
    if (v < -3.0) v = -3.0;
    return v * sigma;
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace marseg
