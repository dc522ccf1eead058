#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace refrec {

/// Counter-based generator: the i-th draw of a stream with key k is
/// mix64(k + (i + 1) * 0x9E3779B97F4A7C15), where mix64 is the SplitMix64
/// finaliser. Streams are derived with split(), so per-sample streams depend
/// only on (seed, path of stream ids) and never on evaluation order.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : key_(mix64(seed ^ 0x6A09E667F3BCC909ULL)) {}

  /// Child stream identified by `stream`; does not advance this generator.
  Rng split(std::uint64_t stream) const;

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n). Unbiased (rejection on the 128-bit product).
  std::uint64_t below(std::uint64_t n);
  /// Standard normal via Box-Muller (one pair per call, second value dropped).
  double normal();

  template <typename T>
  void shuffle(std::span<T> xs) {
    for (size_t i = xs.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(below(i));
      std::swap(xs[i - 1], xs[j]);
    }
  }

  static std::uint64_t mix64(std::uint64_t z);

 private:
  struct KeyTag {};
  Rng(std::uint64_t key, KeyTag) : key_(key) {}

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

/// 64-bit FNV-1a, used for config and artifact hashes.
std::uint64_t fnv1a64(std::span<const char> bytes);

}  // namespace refrec
