#pragma once

#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

namespace dualsc {

// Deterministic 64-bit PRNG (splitmix64 core). The same seed yields the same
// stream on every platform, which the whole pipeline relies on for
// reproducible splits, parameter init, dropout masks and batch order.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 24 mantissa bits, exactly representable in float.
  float next_unit() {
    return static_cast<float>(next_u64() >> 40) * (1.0f / 16777216.0f);
  }

  float uniform(float lo, float hi) { return lo + (hi - lo) * next_unit(); }

  // Box-Muller with a cached spare draw.
  float normal(float mean, float stddev);

  // Index in [0, n), n > 0.
  std::size_t uniform_index(std::size_t n) {
    return static_cast<std::size_t>(next_u64() % static_cast<std::uint64_t>(n));
  }

  // Fisher-Yates.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[uniform_index(i)]);
    }
  }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  float spare_ = 0.0f;
};

}  // namespace dualsc
