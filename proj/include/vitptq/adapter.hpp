// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

#include "vitptq/rng.hpp"
#include "vitptq/tensor.hpp"

namespace vitptq::lowrank {

/// Low-rank correction x * down * up added to a frozen [in, out] weight.
/// `down` is [in, r] and `up` is [r, out]; their product has the weight's
/// shape.
struct LowRankAdapter {
  Tensor down;
  Tensor up;

  /// down ~ N(0, stddev^2), up = 0: the correction starts at exactly zero.
  static LowRankAdapter init(std::size_t in, std::size_t out, std::size_t rank, Rng& rng, double stddev = 1e-3);

  std::size_t rank() const { return down.dim(1); }
  std::size_t in_features() const { return down.dim(0); }
  std::size_t out_features() const { return up.dim(1); }
  std::size_t parameter_count() const { return rank() * (in_features() + out_features()); }
  /// down * up, differentiable.
  Tensor delta() const;
  std::vector<Tensor> parameters() const { return {down, up}; }
};

/// Differentiable rank search over a candidate set: one adapter and one
/// architecture logit per candidate rank.
struct RankSearchState {
  std::vector<std::size_t> candidates;
  Tensor alpha;  // [M] logits
  std::vector<LowRankAdapter> adapters;
  double drop_path_rate = 0.1;
  bool training = true;
  mutable Rng drop_rng{0};

  static RankSearchState init(std::size_t in, std::size_t out, const std::vector<std::size_t>& candidates, Rng& init_rng,
                              Rng drop_rng, double drop_path_rate);

  std::size_t size() const { return candidates.size(); }
  /// softmax(alpha)
  std::vector<double> weights() const;
  std::size_t overhead() const;
  std::vector<Tensor> adapter_parameters() const;
};

/// Sum over candidates of drop_path(softmax(alpha)_j * xhat * down_j * up_j).
/// In training mode each path is dropped with probability drop_path_rate and
/// kept paths are rescaled by 1 / (1 - rate); evaluation mode never drops.
Tensor mixed_correction(const Tensor& xhat, const RankSearchState& st);

}  // namespace vitptq::lowrank
