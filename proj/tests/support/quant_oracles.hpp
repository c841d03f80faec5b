// SPDX-License-Identifier: Apache-2.0
//
// Scalar reference evaluations of the quantizers, compared against the
// vectorized implementations on seeded random tuples.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>

#include "vitptq/quant.hpp"
#include "vitptq/rng.hpp"

namespace vitptq::testkit {

/// clamp(round_half_even(x / s) + z, 0, 2^k - 1)
inline std::int64_t scalar_uniform_code(double x, double s, std::int64_t z, int k) {
  const double r = std::nearbyint(x / s) + static_cast<double>(z);
  const double qmax = static_cast<double>((std::int64_t{1} << k) - 1);
  return static_cast<std::int64_t>(std::min(std::max(r, 0.0), qmax));
}

/// clamp(round_half_even(-log2(x / s)), 0, 2^k - 1), x == 0 -> 2^k - 1
inline std::int64_t scalar_log2_code(double x, double s, int k) {
  const std::int64_t qmax = (std::int64_t{1} << k) - 1;
  if (x == 0.0) return qmax;
  const double r = std::nearbyint(-std::log2(x / s));
  if (r < 0.0) return 0;
  if (r > static_cast<double>(qmax)) return qmax;
  return static_cast<std::int64_t>(r);
}

inline bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof a) == 0; }

struct OracleTally {
  std::size_t tuples = 0;
  std::size_t mismatches = 0;
};

/// Random (x, s, z, k) tuples evaluated in per-channel batches (one channel
/// per tuple) so every element carries its own scale and zero point.
inline OracleTally uniform_oracle(std::uint64_t seed, std::size_t n) {
  Rng rng(seed);
  OracleTally t;
  const std::size_t batch = 1000;
  while (t.tuples < n) {
    const std::size_t m = std::min(batch, n - t.tuples);
    const int k = 2 + static_cast<int>(rng.index(15));
    const std::int64_t qmax = (std::int64_t{1} << k) - 1;
    std::vector<double> xs(m), scales(m);
    std::vector<std::int64_t> zeros(m);
    for (std::size_t i = 0; i < m; ++i) {
      scales[i] = std::exp(rng.uniform(std::log(1e-4), std::log(10.0)));
      zeros[i] = static_cast<std::int64_t>(rng.index(static_cast<std::size_t>(qmax) + 1));
      const double span = scales[i] * static_cast<double>(qmax);
      // A quarter of the draws land exactly between two lattice points.
      if (rng.bernoulli(0.25)) {
        const double code = static_cast<double>(rng.index(static_cast<std::size_t>(qmax) + 1)) - 0.5;
        xs[i] = scales[i] * (code - static_cast<double>(zeros[i]));
      } else {
        xs[i] = rng.uniform(-1.25 * span, 1.25 * span);
      }
    }
    const auto p = quant::QuantParams::channel_wise(scales, zeros, k, 0);
    const quant::IntTensor q = quant::quant_uniform(Tensor({m}, xs), p);
    for (std::size_t i = 0; i < m; ++i) {
      if (q.codes[i] != scalar_uniform_code(xs[i], scales[i], zeros[i], k)) ++t.mismatches;
    }
    t.tuples += m;
  }
  return t;
}

/// Random (x, s, k) tuples, evaluated in per-tensor batches of shared (s, k).
inline OracleTally log2_oracle(std::uint64_t seed, std::size_t n) {
  Rng rng(seed);
  OracleTally t;
  const std::size_t batch = 100;
  while (t.tuples < n) {
    const std::size_t m = std::min(batch, n - t.tuples);
    const int k = 2 + static_cast<int>(rng.index(15));
    const double s = std::exp(rng.uniform(std::log(1e-3), std::log(10.0)));
    std::vector<double> xs(m);
    for (double& x : xs) {
      const double r = rng.uniform();
      if (r < 0.05) {
        x = 0.0;
      } else if (r < 0.3) {
        // Exact powers of two around s (half-way exponents included).
        x = s * std::exp2(-0.5 * static_cast<double>(rng.index(2 * static_cast<std::size_t>(k) + 4)));
      } else {
        x = s * std::exp2(rng.uniform(-static_cast<double>(k) - 4.0, 2.0));
      }
    }
    const quant::IntTensor q = quant::quant_log2(Tensor({m}, xs), quant::QuantParams::tensor_wise(s, 0, k));
    for (std::size_t i = 0; i < m; ++i) {
      if (q.codes[i] != scalar_log2_code(xs[i], s, k)) ++t.mismatches;
    }
    t.tuples += m;
  }
  return t;
}

/// |fake_quant(x) - x| <= s / 2 for x inside [s (0 - z), s (qmax - z)].
inline OracleTally roundtrip_bound(std::uint64_t seed, std::size_t n) {
  Rng rng(seed);
  OracleTally t;
  const std::size_t batch = 1000;
  while (t.tuples < n) {
    const std::size_t m = std::min(batch, n - t.tuples);
    const int k = 2 + static_cast<int>(rng.index(15));
    const std::int64_t qmax = (std::int64_t{1} << k) - 1;
    const double s = std::exp(rng.uniform(std::log(1e-4), std::log(10.0)));
    const auto z = static_cast<std::int64_t>(rng.index(static_cast<std::size_t>(qmax) + 1));
    const double lo = s * static_cast<double>(-z), hi = s * static_cast<double>(qmax - z);
    std::vector<double> xs(m);
    for (double& x : xs) x = rng.uniform(lo, hi);
    const Tensor y = quant::fake_quant(Tensor({m}, xs), quant::QuantParams::tensor_wise(s, z, k));
    for (std::size_t i = 0; i < m; ++i) {
      if (!(std::abs(y[i] - xs[i]) <= s / 2.0)) ++t.mismatches;
    }
    t.tuples += m;
  }
  return t;
}

/// dfq_quant with [b1, b2] = [0, 1] against fake_quant with s = 1 / (2^k - 1),
/// z = 0, compared bit for bit. Inputs: random points of [0, 1] plus every
/// lattice point and every midpoint.
inline OracleTally dfq_degeneracy(int k, std::uint64_t seed, std::size_t n) {
  Rng rng(seed);
  const double levels = static_cast<double>((std::int64_t{1} << k) - 1);
  std::vector<double> xs;
  for (std::size_t i = 0; i < n; ++i) xs.push_back(rng.uniform());
  for (double q = 0.0; q <= levels; q += 1.0) {
    xs.push_back(q / levels);
    if (q < levels) xs.push_back((q + 0.5) / levels);
  }
  xs.push_back(0.0);
  xs.push_back(1.0);
  const Tensor x({xs.size()}, xs);
  const Tensor a = quant::dfq_quant(x, quant::FocusInterval(0.0, 1.0), k);
  const Tensor b = quant::fake_quant(x, quant::QuantParams::tensor_wise(1.0 / levels, 0, k));
  OracleTally t;
  t.tuples = xs.size();
  for (std::size_t i = 0; i < xs.size(); ++i)
    if (!same_bits(a[i], b[i])) ++t.mismatches;
  return t;
}

}  // namespace vitptq::testkit
