#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace ffcsn {

/// Deterministic xoshiro256** generator. Every source of randomness in the
/// library flows through an explicitly passed Rng; there is no global state,
/// and the 4x64-bit state serializes losslessly into checkpoints.
class Rng {
 public:
  using state_type = std::array<std::uint64_t, 4>;

  explicit Rng(std::uint64_t seed) {
    // splitmix64 expansion of the seed into the full state
    std::uint64_t x = seed;
    for (auto& s : state_) s = splitmix64(x);
  }

  explicit Rng(const state_type& state) : state_(state) {}

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform double in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t uniform_int(std::uint64_t n) {
    // rejection sampling to avoid modulo bias
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
  }

  /// Standard normal via Box-Muller. The second sample of each pair is
  /// discarded so the generator state stays a pure function of call count.
  double gaussian() {
    double u1 = uniform();
    if (u1 < 0x1.0p-53) u1 = 0x1.0p-53;
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

  /// Independent child stream keyed by (tag, index). Children of distinct
  /// keys are decorrelated regardless of the parent's position.
  Rng derive(std::uint64_t tag, std::uint64_t index = 0) const {
    std::uint64_t x = state_[0] ^ (tag * 0x9e3779b97f4a7c15ULL);
    x ^= splitmix64_mix(index + 0x632be59bd9b4e019ULL);
    Rng child(0);
    std::uint64_t y = x;
    for (auto& s : child.state_) s = splitmix64(y);
    return child;
  }

  const state_type& state() const { return state_; }
  void set_state(const state_type& s) { state_ = s; }

 private:
  static constexpr double kPi = 3.14159265358979323846;

  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  static std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    return splitmix64_mix(x);
  }

  static std::uint64_t splitmix64_mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  state_type state_{};
};

}  // namespace ffcsn
