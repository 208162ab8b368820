#pragma once

#include <cmath>
#include <cstdint>

namespace stm {

/// Counter-based deterministic generator (splitmix64 stream). Same seed
/// gives the same sample stream on every platform; floating results
/// depend only on libm's log/cos/sin accuracy.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : state_(seed) {}

  /// Independent stream for (seed, index), used for per-sample work.
  static SeededRng derive(std::uint64_t seed, std::uint64_t index) {
    return SeededRng(mix(seed ^ mix(index + 0x51ed270b4d2f2c9dULL)));
  }

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    return mix(state_);
  }

  /// Uniform in [0, 1) with 53 significant bits.
  double uniform01() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Standard normal via Box-Muller; draws come in pairs.
  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1 = uniform01(), u2 = uniform01();
    if (u1 < 1e-300) u1 = 1e-300;
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    cached_ = r * std::sin(a);
    have_cached_ = true;
    return r * std::cos(a);
  }

  /// Standard Gumbel: -log(-log(u)), u clamped to (eps, 1-eps).
  double gumbel() {
    const double eps = 1e-12;
    double u = uniform01();
    if (u < eps) u = eps;
    if (u > 1.0 - eps) u = 1.0 - eps;
    return -std::log(-std::log(u));
  }

  std::uint64_t randint(std::uint64_t n) { return next_u64() % n; }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xbf58476d1ce4e5b9ULL;
    z ^= z >> 27;
    z *= 0x94d049bb133111ebULL;
    z ^= z >> 31;
    return z;
  }

  std::uint64_t state_;
  double cached_ = 0.0;
  bool have_cached_ = false;
};

}  // namespace stm
