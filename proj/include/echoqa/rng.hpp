#pragma once

#include <cstdint>
#include <span>
#include <utility>

namespace echoqa {

/// Deterministic generator: xoshiro256** seeded through splitmix64.
///
/// Draws depend only on the seed, never on the platform's <random>
/// distributions, so sequences are identical across compilers and OSes.
/// Normal variates use the Box-Muller transform with a cached spare.
///
/// Split rule: child(k) is seeded with splitmix64(seed + (k + 1) * 0x9E3779B97F4A7C15),
/// where seed is the value this generator was constructed with. Children
/// therefore do not depend on how many draws the parent has made.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed);

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() noexcept;
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept;
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
  double normal() noexcept;
  /// Unbiased integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n) noexcept;
  bool bernoulli(double p) noexcept { return uniform() < p; }

  SeededRng child(std::uint64_t stream) const noexcept;

  template <typename T>
  void shuffle(std::span<T> items) noexcept {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::uint64_t state_[4];
  double spare_ = 0.0;
  bool has_spare_ = false;
};

std::uint64_t splitmix64(std::uint64_t x) noexcept;

}  // namespace echoqa
