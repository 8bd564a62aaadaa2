#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "chunkssl/array.hpp"

namespace chunkssl {

using Rng = std::mt19937_64;

/// Derives an independent generator for a named sub-stream ("data",
/// "masking", "chunk", ...) from the run seed, so one component's draws can
/// change without perturbing another's.
inline Rng substream(std::uint64_t seed, std::string_view name, std::uint64_t index = 0) {
  // FNV-1a over the name, then splitmix64 mixing with seed and index.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  std::uint64_t z = seed ^ (h + 0x9e3779b97f4a7c15ULL * (index + 1));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  z ^= z >> 31;
  return Rng(z);
}

template <class T>
Array<T> random_normal(std::size_t rows, std::size_t cols, Rng& rng, double stddev = 1.0) {
  std::normal_distribution<double> dist(0.0, stddev);
  Array<T> a(rows, cols);
  for (auto& v : a.data()) v = static_cast<T>(dist(rng));
  return a;
}

template <class T>
Array<T> random_uniform(std::size_t rows, std::size_t cols, Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Array<T> a(rows, cols);
  for (auto& v : a.data()) v = static_cast<T>(dist(rng));
  return a;
}

}  // namespace chunkssl
