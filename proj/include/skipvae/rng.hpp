// Seeded random streams. Every consumer derives its generator from the run's
// root seed and a stream name, so adding draws in one place never shifts the
// draws seen elsewhere.
#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "skipvae/tensor.hpp"

namespace skipvae {

using Rng = std::mt19937_64;

namespace streams {
inline constexpr std::string_view init = "init";
inline constexpr std::string_view shuffle = "shuffle";
inline constexpr std::string_view elbo_noise = "elbo-noise";
inline constexpr std::string_view metrics = "metrics";
inline constexpr std::string_view binarize = "binarize";
inline constexpr std::string_view data = "data";
inline constexpr std::string_view probe = "probe";
inline constexpr std::string_view refine = "refine";
}  // namespace streams

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline Rng substream(std::uint64_t root_seed, std::string_view name) {
  return Rng(splitmix64(root_seed ^ splitmix64(fnv1a(name))));
}

inline Tensor standard_normal(Rng& rng, Shape shape) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(element_count(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace skipvae
