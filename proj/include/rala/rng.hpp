#pragma once

#include <cstdint>

#include "rala/matrix.hpp"

namespace rala {

// Counter-based generator: draw k is a pure function of (seed, stream, k), mixed with
// the SplitMix64 finalizer. Identical seeds give identical sequences on every run.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0) noexcept
      : key_(mix(seed ^ mix(stream + 0x632be59bd9b4e019ULL))) {}

  std::uint64_t next_u64() noexcept { return mix(key_ + 0x9e3779b97f4a7c15ULL * ++counter_); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  // Uniform in (0, 1].
  double uniform_open_zero() noexcept { return 1.0 - uniform(); }

  double normal() noexcept;
  // Normal(0, std) resampled until |x| <= 2 std.
  double truncated_normal(double std) noexcept;

  std::uint64_t below(std::uint64_t n) noexcept { return n == 0 ? 0 : next_u64() % n; }

  Matrix normal_matrix(std::size_t rows, std::size_t cols, double std = 1.0);
  Matrix uniform_matrix(std::size_t rows, std::size_t cols, double lo, double hi);

  static std::uint64_t mix(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace rala
