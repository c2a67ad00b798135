#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace vtp {

/// Deterministic random source.
///
/// std::mt19937_64 is fully specified by the standard, but the standard
/// distributions are not, so the conversions to uniform/normal variates are
/// done here to keep streams bit-identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n) by rejection (unbiased).
  std::uint64_t below(std::uint64_t n);
  /// Standard normal variate (Box-Muller, no cached second value).
  double normal();
  /// Normal(0, std) truncated to [-2 std, 2 std] by rejection.
  double truncated_normal(double std);

  std::string state() const;
  void restore(const std::string& state);

 private:
  std::mt19937_64 engine_;
};

/// Mixes several words into one seed (splitmix64 finalizer chain).
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0);

}  // namespace vtp
