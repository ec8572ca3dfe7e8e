#pragma once

#include <cstdint>
#include <limits>
#include <string_view>
#include <utility>
#include <vector>

namespace pomni {

/// Counter-based generator: output i of a stream is a SplitMix64 finalizer
/// applied to (key, i). Substreams derive new keys from names or integers,
/// so every stochastic site is reproducible independent of call order.
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed = 0) : key_(mix(seed ^ 0x9E3779B97F4A7C15ULL)) {}

  Rng split(std::string_view name) const { return Rng(Key{mix(key_ ^ fnv1a(name))}); }
  Rng split(std::uint64_t index) const { return Rng(Key{mix(key_ + mix(index + 0xD1B54A32D192ED03ULL))}); }

  std::uint64_t next_u64() { return mix(key_ + 0x9E3779B97F4A7C15ULL * ++counter_); }
  result_type operator()() { return next_u64(); }
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  /// Normal(0, sigma) resampled until within +-2 sigma.
  double truncated_normal(double sigma);
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      std::swap(first[static_cast<std::ptrdiff_t>(i - 1)], first[static_cast<std::ptrdiff_t>(below(i))]);
    }
  }

  std::vector<std::size_t> permutation(std::size_t n);

  std::uint64_t key() const { return key_; }

 private:
  struct Key {
    std::uint64_t value;
  };
  explicit Rng(Key k) : key_(k.value) {}

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  static std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    return h;
  }

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace pomni
