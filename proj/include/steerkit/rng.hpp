#pragma once

#include <cmath>
#include <cstdint>

namespace steerkit {

// Deterministic random streams. xoshiro256++ seeded through splitmix64,
// with child-stream derivation from the original seed so substreams are
// independent of how many draws the parent has made. All randomness in the
// library flows through this type; results are bit-stable across runs and
// across worker counts.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed) {
    std::uint64_t x = seed;
    for (auto& w : s_) w = splitmix(x);
    has_spare_ = false;
    spare_ = 0.0;
  }

  // Substream `stream` of this generator's seed. child(i) == child(i) always.
  Rng child(std::uint64_t stream) const {
    std::uint64_t x = seed_ ^ (0x9E3779B97F4A7C15ull * (stream + 1));
    return Rng(splitmix(x));
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform01() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller; the spare is cached on the stream.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform01();
    double u2 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  std::uint64_t seed() const { return seed_; }

 private:
  static std::uint64_t splitmix(std::uint64_t& x) {
    x += 0x9E3779B97F4A7C15ull;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  static std::uint64_t rotl(std::uint64_t v, int k) {
    return (v << k) | (v >> (64 - k));
  }

  std::uint64_t seed_;
  std::uint64_t s_[4];
  bool has_spare_;
  double spare_;
};

}  // namespace steerkit
