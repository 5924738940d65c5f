#pragma once

#include <cstdint>
#include <random>
#include <span>

namespace ms2s {

using Rng = std::mt19937_64;

// splitmix64 finalizer; used to derive independent streams from one seed.
inline uint64_t mix_seed(uint64_t base, uint64_t stream) {
  uint64_t z = base + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline Rng make_rng(uint64_t seed, uint64_t stream = 0) {
  return Rng(mix_seed(seed, stream));
}

template <typename T>
void fill_gaussian(std::span<T> out, Rng& rng, double mean = 0.0, double stddev = 1.0) {
  std::normal_distribution<double> dist(mean, stddev);
  for (auto& v : out) v = static_cast<T>(dist(rng));
}

template <typename T>
void fill_uniform(std::span<T> out, Rng& rng, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : out) v = static_cast<T>(dist(rng));
}

}  // namespace ms2s
