// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <vector>

namespace vitptq {

/// Seeded generator. Independent streams are derived from one root seed and
/// a stream name ("split", "droppath", "batch", "init", ...), so changing how
/// much one stream is consumed never perturbs another.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  static Rng stream(std::uint64_t root_seed, std::string_view name);

  double normal(double mean = 0.0, double stddev = 1.0);
  double uniform(double lo = 0.0, double hi = 1.0);
  bool bernoulli(double p);
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n);
  /// Random permutation of 0..n-1.
  std::vector<std::size_t> permutation(std::size_t n);
  /// k distinct entries of `pool` drawn uniformly (all of it if k >= size).
  std::vector<std::size_t> sample(std::span<const std::size_t> pool, std::size_t k);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace vitptq
