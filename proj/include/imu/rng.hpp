#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>

namespace imu {

// splitmix64 output step. Used to expand seeds and to derive per-replication
// stream seeds from (master_seed, counter) pairs.
inline std::uint64_t splitmix64_next(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// xoshiro256++ with a splitmix64-seeded state. Hand-rolled instead of <random>
// so that draw sequences are bit-identical across platforms and standard
// library versions, which the reproducibility contract requires.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) {
    std::uint64_t sm = seed;
    for (auto& w : s_) w = splitmix64_next(sm);
    if ((s_[0] | s_[1] | s_[2] | s_[3]) == 0) s_[0] = 1;  // forbidden all-zero state
  }

  // Stream seed for replication `index` under `master_seed`. Pure function of
  // (master_seed, index): replications can be scheduled in any order on any
  // number of threads and still see identical randomness.
  static std::uint64_t derive_seed(std::uint64_t master_seed, std::uint64_t index) {
    std::uint64_t state = master_seed + 0x9E3779B97F4A7C15ULL * index;
    return splitmix64_next(state);
  }

  static RngStream for_replication(std::uint64_t master_seed, std::uint64_t index) {
    return RngStream(derive_seed(master_seed, index));
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

  // Uniform on [0, 1), 53-bit resolution.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  bool bernoulli(double p) { return uniform01() < p; }

  // Number of failures before the first success, P(l) = q (1-q)^l.
  long geometric(double q) {
    if (!(q > 0.0) || q > 1.0) throw std::invalid_argument("geometric: q must be in (0, 1]");
    if (q == 1.0) return 0;
    const double u = uniform01();
    return static_cast<long>(std::log1p(-u) / std::log1p(-q));
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  std::uint64_t s_[4];
};

}  // namespace imu
