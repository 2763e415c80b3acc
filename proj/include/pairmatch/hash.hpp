#pragma once

#include <bit>
#include <cstdint>
#include <span>

#include "pairmatch/core_data.hpp"

namespace pairmatch {

/// SplitMix64 finalizer: a bijective 64-bit mix.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
  std::uint64_t z = x + 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Folds `v` into a running hash `h`.
constexpr std::uint64_t hash_combine(std::uint64_t h, std::uint64_t v) { return splitmix64(h ^ splitmix64(v)); }

/// Identifies the data a fit was computed from; equal summaries give equal
/// fingerprints (used to refuse cross-dataset likelihood-ratio tests).
inline std::uint64_t fingerprint(std::span<const PairSummary> summaries) {
  std::uint64_t h = splitmix64(summaries.size());
  auto dbl = [](double d) { return std::bit_cast<std::uint64_t>(d); };
  for (const auto& s : summaries) {
    h = hash_combine(h, static_cast<std::uint64_t>(s.pair_id));
    h = hash_combine(h, static_cast<std::uint64_t>(s.n_treated));
    h = hash_combine(h, static_cast<std::uint64_t>(s.n_control));
    h = hash_combine(h, dbl(s.mean_treated));
    h = hash_combine(h, dbl(s.mean_control));
    h = hash_combine(h, dbl(s.sse_within));
    h = hash_combine(h, s.x_treated ? dbl(*s.x_treated) : 0x5A5A5A5AULL);
    h = hash_combine(h, s.x_control ? dbl(*s.x_control) : 0xA5A5A5A5ULL);
  }
  return h;
}

}  // namespace pairmatch
