#pragma once

#include <cstdint>
#include <limits>
#include <random>
#include <utility>

namespace sdg {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Deterministic generator with cheap stream splitting: one master seed fans
// out into independent sub-streams (parameter init, shuffling, method noise)
// so that disabling one consumer never shifts another consumer's sequence.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  static Rng stream(std::uint64_t seed, std::uint64_t tag) {
    return Rng(splitmix64(splitmix64(seed) ^ tag));
  }

  std::uint64_t next() { return gen_(); }

  // Uniform in [0, 1), 53 random bits; identical across platforms.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t rem = (std::numeric_limits<std::uint64_t>::max() % n + 1) % n;
    const std::uint64_t bound = 0 - rem;  // 2^64 - (2^64 mod n), wraps to 0 when n divides 2^64
    for (;;) {
      const std::uint64_t r = gen_();
      if (bound == 0 || r < bound) return r % n;
    }
  }

  template <class It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      std::swap(first[i - 1], first[below(i)]);
    }
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace sdg
