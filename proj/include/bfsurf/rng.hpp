#pragma once

#include <cstdint>

namespace bfsurf {

/// Counter-based generator: the n-th output is a SplitMix64 finalizer applied
/// to key + n * golden-gamma. Streams are addressed by key, so any draw can be
/// regenerated from (seed, indices) alone, independent of thread schedule.
/// Distributions are implemented here rather than via <random> so that output
/// is identical across standard libraries.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t key) noexcept : key_(key) {}

  std::uint64_t next_u64() noexcept;
  /// Uniform on the open interval (0, 1).
  double uniform() noexcept;
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) noexcept;
  double normal() noexcept;
  /// Gamma(shape, rate) via Marsaglia-Tsang.
  double gamma(double shape, double rate) noexcept;

  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

std::uint64_t mix64(std::uint64_t z) noexcept;

/// Derives an independent stream key from a seed and up to three indices.
std::uint64_t stream_key(std::uint64_t seed, std::uint64_t a = 0, std::uint64_t b = 0,
                         std::uint64_t c = 0) noexcept;

}  // namespace bfsurf
