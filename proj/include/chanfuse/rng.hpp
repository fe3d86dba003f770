#pragma once

#include <cstdint>
#include <random>

namespace chanfuse {

/// SplitMix64 finalizer; used to derive independent streams from (seed, index).
std::uint64_t mix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

/// Explicit random stream. The variate transforms are written out here rather
/// than taken from <random> distributions so sequences are identical across
/// standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform on the open interval (0, 1).
  double uniform_open();
  /// Uniform on [lo, hi).
  double uniform(double lo, double hi);
  /// Standard normal (Box-Muller, no cached second variate).
  double normal();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  /// Standard Gumbel variate -log(-log U).
  double gumbel();

 private:
  std::mt19937_64 engine_;
};

}  // namespace chanfuse
