// SPDX-License-Identifier: Apache-2.0
//
// Folds channel-wise quantization of a LayerNorm output into a single
// layer-wise (scale, zero point). With r_c = s_c / s and
// d_c = s (z_c - z):
//   gamma_c <- gamma_c / r_c,   beta_c <- beta_c / r_c + d_c
//   W[c, :] <- r_c W[c, :],     b <- b - sum_c r_c d_c W[c, :]
// so x'_c / s + z == x_c / s_c + z_c (same integer codes) and the
// full-precision function of LayerNorm + successor is unchanged.
#pragma once

#include <cstdint>
#include <vector>

#include "vitptq/model.hpp"
#include "vitptq/quant.hpp"

namespace vitptq::reparam {

struct ReparamPlan {
  std::vector<double> channel_scale;
  std::vector<std::int64_t> channel_zero;
  double scale = 1.0;           // geometric mean of channel_scale
  std::int64_t zero_point = 0;  // rounded mean of channel_zero
  std::vector<double> ratio;    // channel_scale / scale
  int bits = 8;

  bool is_identity() const;
};

ReparamPlan build_plan(const quant::QuantParams& channel_qp);

/// Rewrites `ln` and `successor` in place and switches the successor's input
/// quantizer to the layer-wise pair. A calibrated weight quantizer is
/// re-fitted (min-max, per output channel) to the rescaled weight.
void apply_plan(const ReparamPlan& plan, LayerNormParams& ln, LinearLayer& successor);

/// Exact algebraic inverse of apply_plan on the parameters (quantizer state
/// is not restored).
void revert_plan(const ReparamPlan& plan, LayerNormParams& ln, LinearLayer& successor);

}  // namespace vitptq::reparam
