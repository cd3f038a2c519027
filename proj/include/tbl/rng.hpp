#pragma once

#include <cstdint>
#include <initializer_list>
#include <limits>

namespace tbl {

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Hashes a tuple of counters into one 64-bit key. Order-sensitive.
constexpr std::uint64_t hash_counters(std::initializer_list<std::uint64_t> counters) {
  std::uint64_t h = 0x6a09e667f3bcc908ULL;
  for (std::uint64_t c : counters) h = mix64(h ^ mix64(c));
  return h;
}

/// Small counter-based generator satisfying UniformRandomBitGenerator. Each independent
/// stream is keyed by hash_counters(...) so results do not depend on evaluation order.
class StreamRng {
 public:
  using result_type = std::uint64_t;

  explicit constexpr StreamRng(std::uint64_t key) : state_(key) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  constexpr result_type operator()() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform double in [0, 1).
  constexpr double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

 private:
  std::uint64_t state_;
};

}  // namespace tbl
