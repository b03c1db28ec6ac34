// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace spt {

using Rng = std::mt19937_64;

// splitmix64 finalizer
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t hash_tag(std::string_view tag) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Derives an independent stream seed from a root seed, a component tag and
/// up to two indices. Every random consumer draws from its own derived seed so
/// sub-experiments stay reproducible in isolation.
constexpr std::uint64_t derive_seed(std::uint64_t root, std::string_view tag, std::uint64_t i = 0,
                                    std::uint64_t j = 0) {
  return mix64(mix64(mix64(root ^ hash_tag(tag)) + i) + j);
}

/// Uniform integer in [0, n).
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(rng);
}

inline double uniform_unit(Rng& rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

/// Normal(0, std) truncated to +-2 std by resampling.
inline double truncated_normal(Rng& rng, double std_dev) {
  std::normal_distribution<double> dist(0.0, 1.0);
  for (;;) {
    const double v = dist(rng);
    if (std::abs(v) <= 2.0) return v * std_dev;
  }
}

}  // namespace spt
