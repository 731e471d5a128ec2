#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace minpart {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t rotl64(std::uint64_t x, int k) {
  return (x << k) | (x >> (64 - k));
}

}  // namespace detail

/// Deterministic random stream (xoshiro256++). All randomness in the library
/// flows through explicit RngState values, so results are reproducible for a
/// given seed independently of platform RNG facilities and thread scheduling.
struct RngState {
  std::uint64_t s[4] = {1, 2, 3, 4};
  bool has_cached_normal = false;
  double cached_normal = 0.0;

  static RngState seeded(std::uint64_t seed) {
    RngState r;
    std::uint64_t sm = seed;
    for (auto& w : r.s) w = detail::splitmix64(sm);
    return r;
  }

  /// Independent stream derived from (seed, a, b). Used to give each
  /// (step, example) pair its own substream.
  static RngState derive(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
    std::uint64_t sm = seed;
    std::uint64_t h = detail::splitmix64(sm);
    sm = h ^ (a * 0x9e3779b97f4a7c15ULL + 0x7f4a7c159e3779b9ULL);
    h = detail::splitmix64(sm);
    sm = h ^ (b * 0xbf58476d1ce4e5b9ULL + 0x94d049bb133111ebULL);
    return seeded(detail::splitmix64(sm));
  }

  std::uint64_t next() {
    const std::uint64_t result = detail::rotl64(s[0] + s[3], 23) + s[0];
    const std::uint64_t t = s[1] << 17;
    s[2] ^= s[0];
    s[3] ^= s[1];
    s[1] ^= s[2];
    s[0] ^= s[3];
    s[2] ^= t;
    s[3] = detail::rotl64(s[3], 45);
    return result;
  }

  /// Uniform in [0, 1) with 53 random bits.
  double next_double() {
    return static_cast<double>(next() >> 11) * 0x1.0p-53;
  }

  /// Unbiased uniform integer in [0, n). n must be >= 1.
  std::uint64_t next_below(std::uint64_t n) {
    const std::uint64_t threshold = (0 - n) % n;  // 2^64 mod n
    std::uint64_t x;
    do {
      x = next();
    } while (x < threshold);
    return x % n;
  }

  bool next_bit() { return (next() >> 63) != 0; }

  /// Standard normal via Box-Muller (pair cached in the state).
  double next_normal() {
    if (has_cached_normal) {
      has_cached_normal = false;
      return cached_normal;
    }
    double u1 = next_double();
    while (u1 <= 0.0) u1 = next_double();
    const double u2 = next_double();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    cached_normal = r * std::sin(a);
    has_cached_normal = true;
    return r * std::cos(a);
  }

  /// Unbiased Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }
};

}  // namespace minpart
