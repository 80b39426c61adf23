// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <random>
#include <vector>

namespace fedemoji {

using Rng = std::mt19937_64;

/// Tags separating the independent random streams drawn from one run seed.
enum class Stream : std::uint64_t {
  kInit = 1,
  kSynth,
  kPartition,
  kTruncate,
  kDownweight,
  kShuffle,
  kSample,
  kAvailability,
  kEval,
  kHoldout,
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Mixes a base seed with a stream tag and any number of integer coordinates
/// (round, client id, epoch...) into a child seed.
inline std::uint64_t derive_seed(std::uint64_t base, Stream tag,
                                 std::initializer_list<std::uint64_t> parts = {}) {
  std::uint64_t h = splitmix64(base ^ splitmix64(static_cast<std::uint64_t>(tag)));
  for (std::uint64_t p : parts) h = splitmix64(h ^ splitmix64(p + 0x632BE59BD9B4E019ULL));
  return h;
}

inline Rng make_rng(std::uint64_t base, Stream tag,
                    std::initializer_list<std::uint64_t> parts = {}) {
  return Rng(derive_seed(base, tag, parts));
}

// The std distributions are implementation-defined; these helpers keep
// generated data identical across standard libraries.

/// Uniform double in [0, 1).
inline double uniform01(Rng &rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform_real(Rng &rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

/// Uniform integer in [0, n). Requires n > 0.
inline std::size_t uniform_index(Rng &rng, std::size_t n) {
  // Lemire's multiply-shift with rejection.
  std::uint64_t x = rng();
  __uint128_t m = static_cast<__uint128_t>(x) * n;
  auto low = static_cast<std::uint64_t>(m);
  if (low < n) {
    const std::uint64_t threshold = (0 - static_cast<std::uint64_t>(n)) % n;
    while (low < threshold) {
      x = rng();
      m = static_cast<__uint128_t>(x) * n;
      low = static_cast<std::uint64_t>(m);
    }
  }
  return static_cast<std::size_t>(m >> 64);
}

inline bool bernoulli(Rng &rng, double p) { return uniform01(rng) < p; }

inline double standard_normal(Rng &rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

/// Index drawn proportionally to non-negative weights (at least one positive).
inline std::size_t categorical(Rng &rng, const std::vector<double> &weights) {
  double total = 0.0;
  for (double w : weights) total += w;
  double u = uniform01(rng) * total;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (u < weights[i]) return i;
    u -= weights[i];
  }
  for (std::size_t i = weights.size(); i-- > 0;)
    if (weights[i] > 0.0) return i;
  return 0;
}

template <typename T>
void shuffle(std::vector<T> &items, Rng &rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::size_t j = uniform_index(rng, i);
    std::swap(items[i - 1], items[j]);
  }
}

}  // namespace fedemoji
