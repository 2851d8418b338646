#pragma once

#include <cstdint>
#include <string_view>

namespace histonorm {

/// Identifier written into every plan and effective config so that
/// augmentation streams stay auditable across versions.
inline constexpr std::string_view kRngAlgorithm = "splitmix64-keyed-stream/v1";

constexpr std::uint64_t kGoldenGamma = 0x9E3779B97F4A7C15ULL;

/// SplitMix64 finalizer (Steele, Lea, Flood 2014).
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// A SplitMix64 sequence positioned at `counter`. Value n of the stream is
/// mix64(key + n * gamma), so any position is reachable in O(1).
struct RngState {
  std::uint64_t key = 0;
  std::uint64_t counter = 0;

  constexpr std::uint64_t next_u64() noexcept {
    ++counter;
    return mix64(key + counter * kGoldenGamma);
  }

  /// Uniform in [0, 1) with 53 random bits.
  constexpr double next_unit() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  friend constexpr bool operator==(const RngState&, const RngState&) = default;
};

/// Independent stream for one (seed, epoch, item) triple. Streams do not
/// depend on visiting order, so parallel loaders reproduce serial ones.
constexpr RngState item_stream(std::uint64_t seed, std::uint64_t epoch, std::uint64_t item) noexcept {
  std::uint64_t k = mix64(seed + kGoldenGamma);
  k = mix64(k ^ (epoch + 0x632BE59BD9B4E019ULL));
  k = mix64(k ^ (item + 0x8CB92BA72F3D8DD7ULL));
  return RngState{k, 0};
}

}  // namespace histonorm
