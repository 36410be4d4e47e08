#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace dreamrec {

/// What a random stream is used for. Part of the stream key so that, e.g.,
/// the training noise of example 7 never aliases its evaluation noise.
enum class StreamPurpose : std::uint64_t {
  kInit = 1,
  kShuffle = 2,
  kTrain = 3,
  kGenerate = 4,
  kNegative = 5,
  kSynthetic = 6,
  kGradCheck = 7,
  kTest = 8,
};

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Counter-based generator: draw i of a stream is a pure function of
/// (key, i), so streams can be created per example in any order and on any
/// thread without changing results.
///
/// Normal variates use Box-Muller and consume two 64-bit draws each (only the
/// cosine branch is used, so a normal never depends on a cached value).
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t a = 0, std::uint64_t b = 0,
               std::uint64_t c = 0) noexcept
      : key_(mix64(seed ^ mix64(a ^ mix64(b ^ mix64(c))))) {}

  static Rng stream(std::uint64_t seed, StreamPurpose purpose, std::uint64_t round,
                    std::uint64_t index) noexcept {
    return Rng(seed, static_cast<std::uint64_t>(purpose), round, index);
  }

  std::uint64_t next_u64() noexcept {
    return mix64(key_ + mix64(counter_++ * 0xD1B54A32D192ED03ull));
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n) noexcept {
    const std::uint64_t threshold = (0 - n) % n;
    for (;;) {
      const std::uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  double normal() noexcept {
    const double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t draws() const noexcept { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace dreamrec
