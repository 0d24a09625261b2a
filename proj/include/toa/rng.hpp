#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "toa/tensor.hpp"

namespace toa {

/// SplitMix64 finalizer; used to derive independent child seeds.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

/// Counter-based split: child `index` of `seed`. Distinct (seed, index) pairs
/// give statistically independent streams.
constexpr std::uint64_t split_seed(std::uint64_t seed, std::uint64_t index) {
  return mix64(mix64(seed) ^ mix64(index + 0x632BE59BD9B4E019ull));
}

/// Named child streams so that e.g. evaluation sampling never perturbs training.
constexpr std::uint64_t split_seed(std::uint64_t seed, std::string_view stream) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (char c : stream) h = (h ^ static_cast<unsigned char>(c)) * 0x100000001B3ull;
  return split_seed(seed, h);
}

using Rng = std::mt19937_64;

template <std::floating_point T>
Tensor<T> randn(const Shape& shape, Rng& rng, T stddev = T(1)) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(dist(rng)) * stddev;
  return Tensor<T>(shape, std::move(v));
}

template <std::floating_point T>
Tensor<T> rand_uniform(const Shape& shape, Rng& rng, T lo, T hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>(shape, std::move(v));
}

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }
inline bool coin(Rng& rng, double p) { return uniform01(rng) < p; }

}  // namespace toa
