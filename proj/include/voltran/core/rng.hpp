#pragma once

#include <cstdint>
#include <random>

namespace voltran {

// Seeded stream; every source of randomness in the pipeline goes through
// one of these so runs are reproducible from the config seed.
struct rng_stream {
  std::mt19937_64 gen;

  explicit rng_stream(uint64_t seed = 0) : gen(seed) {}

  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(gen);
  }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(gen);
  }
  int64_t uniform_int(int64_t lo, int64_t hi) {  // inclusive range
    return std::uniform_int_distribution<int64_t>(lo, hi)(gen);
  }
};

// Derive a child seed from (seed, salt) without perturbing any live stream
// (splitmix64 finalizer).
inline uint64_t fork_seed(uint64_t seed, uint64_t salt) {
  uint64_t x = seed ^ (salt * 0x9e3779b97f4a7c15ull);
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ull;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebull;
  x ^= x >> 31;
  return x;
}

}  // namespace voltran
