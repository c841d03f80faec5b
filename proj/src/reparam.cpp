// SPDX-License-Identifier: Apache-2.0
#include "vitptq/reparam.hpp"

#include <cmath>

#include "vitptq/errors.hpp"

namespace vitptq::reparam {

namespace {

void check_structure(const ReparamPlan& plan, const LayerNormParams& ln, const LinearLayer& successor) {
  const std::size_t c = plan.ratio.size();
  if (ln.gamma.numel() != c || ln.beta.numel() != c || successor.in_features() != c) {
    throw ContractError("reparameterization plan over " + std::to_string(c) + " channels does not match LayerNorm width " +
                        std::to_string(ln.gamma.numel()) + " feeding " + successor.name + " with " +
                        std::to_string(successor.in_features()) + " inputs");
  }
}

std::vector<double> shifts(const ReparamPlan& plan) {
  std::vector<double> d(plan.ratio.size());
  for (std::size_t c = 0; c < d.size(); ++c) d[c] = plan.scale * static_cast<double>(plan.channel_zero[c] - plan.zero_point);
  return d;
}

void scale_rows(Tensor& t, const std::vector<double>& factor, bool divide) {
  const std::size_t cols = t.dim(1);
  auto w = t.mutable_data();
  for (std::size_t c = 0; c < factor.size(); ++c)
    for (std::size_t j = 0; j < cols; ++j) w[c * cols + j] = divide ? w[c * cols + j] / factor[c] : w[c * cols + j] * factor[c];
}

}  // namespace

bool ReparamPlan::is_identity() const {
  for (std::size_t c = 0; c < ratio.size(); ++c) {
    if (ratio[c] != 1.0 || channel_zero[c] != zero_point) return false;
  }
  return true;
}

ReparamPlan build_plan(const quant::QuantParams& channel_qp) {
  if (channel_qp.granularity != quant::Granularity::per_channel) {
    throw ContractError("reparameterization needs channel-wise parameters");
  }
  ReparamPlan plan;
  plan.channel_scale = channel_qp.scale;
  plan.channel_zero = channel_qp.zero_point;
  plan.bits = channel_qp.bits;
  double log_sum = 0.0;
  double zero_sum = 0.0;
  bool homogeneous = true;
  for (std::size_t c = 0; c < plan.channel_scale.size(); ++c) {
    if (!(plan.channel_scale[c] > 0.0)) throw ContractError("channel scale must be positive");
    log_sum += std::log(plan.channel_scale[c]);
    zero_sum += static_cast<double>(plan.channel_zero[c]);
    homogeneous = homogeneous && plan.channel_scale[c] == plan.channel_scale[0];
  }
  const double n = static_cast<double>(plan.channel_scale.size());
  // Keep the exact value when every channel agrees so the plan is a no-op.
  plan.scale = homogeneous ? plan.channel_scale[0] : std::exp(log_sum / n);
  plan.zero_point = static_cast<std::int64_t>(std::nearbyint(zero_sum / n));
  plan.ratio.resize(plan.channel_scale.size());
  for (std::size_t c = 0; c < plan.ratio.size(); ++c) plan.ratio[c] = plan.channel_scale[c] / plan.scale;
  return plan;
}

void apply_plan(const ReparamPlan& plan, LayerNormParams& ln, LinearLayer& successor) {
  check_structure(plan, ln, successor);
  const std::vector<double> d = shifts(plan);
  const std::size_t out = successor.out_features();

  // Bias shift uses the effective weight before rescaling.
  std::vector<double> shift(out, 0.0);
  {
    NoGradGuard guard;
    const Tensor weff = successor.effective_weight();
    auto w = weff.data();
    for (std::size_t c = 0; c < d.size(); ++c) {
      const double f = plan.ratio[c] * d[c];
      if (f == 0.0) continue;
      for (std::size_t j = 0; j < out; ++j) shift[j] += f * w[c * out + j];
    }
  }
  if (!successor.bias) {
    successor.bias = Tensor::zeros({out});
    successor.bias->set_requires_grad(successor.weight.requires_grad());
  }
  auto b = successor.bias->mutable_data();
  for (std::size_t j = 0; j < out; ++j) b[j] -= shift[j];

  auto gamma = ln.gamma.mutable_data();
  auto beta = ln.beta.mutable_data();
  for (std::size_t c = 0; c < d.size(); ++c) {
    gamma[c] /= plan.ratio[c];
    beta[c] = beta[c] / plan.ratio[c] + d[c];
  }
  scale_rows(successor.weight, plan.ratio, false);
  if (successor.adapter) scale_rows(successor.adapter->down, plan.ratio, false);

  successor.input_qp = quant::QuantParams::tensor_wise(plan.scale, plan.zero_point, plan.bits);
  if (successor.weight_qp) {
    NoGradGuard guard;
    successor.weight_qp = quant::calibrate_minmax(successor.effective_weight(), successor.weight_qp->bits,
                                                  quant::Granularity::per_channel, 1);
  }
}

void revert_plan(const ReparamPlan& plan, LayerNormParams& ln, LinearLayer& successor) {
  check_structure(plan, ln, successor);
  const std::vector<double> d = shifts(plan);
  const std::size_t out = successor.out_features();
  if (successor.bias) {
    NoGradGuard guard;
    const Tensor weff = successor.effective_weight();
    auto w = weff.data();
    auto b = successor.bias->mutable_data();
    for (std::size_t c = 0; c < d.size(); ++c) {
      if (d[c] == 0.0) continue;
      for (std::size_t j = 0; j < out; ++j) b[j] += d[c] * w[c * out + j];
    }
  }
  scale_rows(successor.weight, plan.ratio, true);
  if (successor.adapter) scale_rows(successor.adapter->down, plan.ratio, true);
  auto gamma = ln.gamma.mutable_data();
  auto beta = ln.beta.mutable_data();
  for (std::size_t c = 0; c < d.size(); ++c) {
    gamma[c] *= plan.ratio[c];
    beta[c] = (beta[c] - d[c]) * plan.ratio[c];
  }
}

}  // namespace vitptq::reparam
