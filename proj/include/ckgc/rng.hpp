#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace ckgc {

// Deterministic RNG wrapper. std::uniform_int_distribution is
// implementation-defined, so the integer/real draws are spelled out here to
// keep runs reproducible across standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // Uniform integer in [0, n) via rejection sampling (unbiased).
  uint64_t uniform(uint64_t n) {
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
      x = gen_();
    } while (x >= limit);
    return x % n;
  }

  // Uniform double in [0, 1) with 53-bit resolution.
  double uniform_real() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  // Uniform double in [lo, hi).
  double uniform_real(double lo, double hi) { return lo + (hi - lo) * uniform_real(); }

  bool coin() { return (gen_() & 1u) != 0; }

  // Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Sample k distinct indices from [0, n), in selection order.
  std::vector<size_t> sample_without_replacement(size_t n, size_t k) {
    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = i;
    for (size_t i = 0; i < k && i < n; ++i) {
      size_t j = i + static_cast<size_t>(uniform(n - i));
      std::swap(idx[i], idx[j]);
    }
    idx.resize(k < n ? k : n);
    return idx;
  }

 private:
  std::mt19937_64 gen_;
};

// SplitMix64 finalizer; used to derive independent seed streams.
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Seed for the `tag`-th sub-stream of a base seed.
inline uint64_t substream_seed(uint64_t seed, uint64_t tag) {
  return splitmix64(seed ^ splitmix64(tag + 0x9E3779B97F4A7C15ull));
}

}  // namespace ckgc
