// SPDX-License-Identifier: Apache-2.0
#include "vitptq/quant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "vitptq/errors.hpp"

namespace vitptq::quant {

namespace {

// Maps a flat element index to its channel (or 0 for per-tensor params).
struct ChannelMap {
  std::size_t inner = 1;
  std::size_t n = 1;
  bool per_channel = false;

  ChannelMap(const QuantParams& p, const Shape& shape) {
    if (p.granularity == Granularity::per_tensor) return;
    per_channel = true;
    n = shape[p.axis];
    for (std::size_t i = p.axis + 1; i < shape.size(); ++i) inner *= shape[i];
  }
  std::size_t operator()(std::size_t flat) const { return per_channel ? (flat / inner) % n : 0; }
};

double round_half_even(double v) { return std::nearbyint(v); }

std::int64_t clamp_code(double v, std::int64_t qmax) {
  // Clamp in floating point first so +-inf never reaches the integer cast.
  return static_cast<std::int64_t>(std::clamp(v, 0.0, static_cast<double>(qmax)));
}

}  // namespace

QuantParams QuantParams::tensor_wise(double scale, std::int64_t zero_point, int bits) {
  QuantParams p;
  p.scale = {scale};
  p.zero_point = {zero_point};
  p.bits = bits;
  p.validate();
  return p;
}

QuantParams QuantParams::channel_wise(std::vector<double> scale, std::vector<std::int64_t> zero_point, int bits,
                                      std::size_t axis) {
  QuantParams p;
  p.scale = std::move(scale);
  p.zero_point = std::move(zero_point);
  p.bits = bits;
  p.granularity = Granularity::per_channel;
  p.axis = axis;
  p.validate();
  return p;
}

void QuantParams::validate() const {
  if (bits < 2 || bits > 16) throw ContractError("bit-width must be in [2, 16], got " + std::to_string(bits));
  if (scale.empty() || scale.size() != zero_point.size()) {
    throw ContractError("scale and zero point must be nonempty and of equal length");
  }
  if (granularity == Granularity::per_tensor && scale.size() != 1) {
    throw ContractError("per-tensor parameters must hold exactly one scale");
  }
  for (std::size_t i = 0; i < scale.size(); ++i) {
    if (!(scale[i] > 0.0) || !std::isfinite(scale[i])) throw ContractError("quantization scale must be positive");
    if (zero_point[i] < 0 || zero_point[i] > qmax()) {
      throw ContractError("zero point " + std::to_string(zero_point[i]) + " outside [0, " + std::to_string(qmax()) + "]");
    }
  }
}

void QuantParams::check_shape(const Shape& shape) const {
  if (granularity == Granularity::per_tensor) return;
  if (axis >= shape.size() || shape[axis] != scale.size()) {
    throw DimensionError("per-channel parameters with " + std::to_string(scale.size()) + " channels on axis " +
                         std::to_string(axis) + " do not fit " + shape_str(shape));
  }
}

IntTensor quant_uniform(const Tensor& x, const QuantParams& p) {
  p.check_shape(x.shape());
  const ChannelMap ch(p, x.shape());
  const std::int64_t qmax = p.qmax();
  auto in = x.data();
  IntTensor q{x.shape(), std::vector<std::int64_t>(in.size())};
  for (std::size_t i = 0; i < in.size(); ++i) {
    const std::size_t c = ch(i);
    q.codes[i] = clamp_code(round_half_even(in[i] / p.scale[c]) + static_cast<double>(p.zero_point[c]), qmax);
  }
  return q;
}

Tensor dequant_uniform(const IntTensor& q, const QuantParams& p) {
  p.check_shape(q.shape);
  const ChannelMap ch(p, q.shape);
  std::vector<double> out(q.codes.size());
  for (std::size_t i = 0; i < q.codes.size(); ++i) {
    if (q.codes[i] < 0 || q.codes[i] > p.qmax()) {
      throw ContractError("code " + std::to_string(q.codes[i]) + " outside [0, " + std::to_string(p.qmax()) + "]");
    }
    const std::size_t c = ch(i);
    out[i] = p.scale[c] * static_cast<double>(q.codes[i] - p.zero_point[c]);
  }
  return Tensor(q.shape, std::move(out));
}

Tensor fake_quant(const Tensor& x, const QuantParams& p) {
  const IntTensor q = quant_uniform(x, p);
  Tensor deq = dequant_uniform(q, p);
  const ChannelMap ch(p, x.shape());
  auto in = x.data();
  std::vector<bool> pass(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    const std::size_t c = ch(i);
    const double lo = p.scale[c] * static_cast<double>(-p.zero_point[c]);
    const double hi = p.scale[c] * static_cast<double>(p.qmax() - p.zero_point[c]);
    pass[i] = in[i] > lo && in[i] < hi;
  }
  auto values = deq.data();
  return Tensor::from_op(x.shape(), std::vector<double>(values.begin(), values.end()), {x},
                         [pass = std::move(pass)](std::span<const double> g, std::span<double* const> gin) {
                           for (std::size_t i = 0; i < g.size(); ++i)
                             if (pass[i]) gin[0][i] += g[i];
                         });
}

IntTensor quant_log2(const Tensor& x, const QuantParams& p) {
  if (p.granularity != Granularity::per_tensor) throw ContractError("log2 quantizer is per-tensor only");
  const double s = p.scale[0];
  auto in = x.data();
  IntTensor q{x.shape(), std::vector<std::int64_t>(in.size())};
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (in[i] < 0.0) throw ContractError("log2 quantizer requires non-negative input");
    const double v = in[i] == 0.0 ? std::numeric_limits<double>::infinity() : -std::log2(in[i] / s);
    q.codes[i] = clamp_code(round_half_even(v), p.qmax());
  }
  return q;
}

Tensor dequant_log2(const IntTensor& q, const QuantParams& p) {
  const double s = p.scale[0];
  std::vector<double> out(q.codes.size());
  for (std::size_t i = 0; i < q.codes.size(); ++i) {
    if (q.codes[i] < 0 || q.codes[i] > p.qmax()) throw ContractError("log2 code out of range");
    out[i] = s * std::exp2(-static_cast<double>(q.codes[i]));
  }
  return Tensor(q.shape, std::move(out));
}

Tensor fake_quant_log2(const Tensor& x, const QuantParams& p) {
  Tensor deq = dequant_log2(quant_log2(x, p), p);
  const double s = p.scale[0];
  const double lo = s * std::exp2(-static_cast<double>(p.qmax()));
  auto in = x.data();
  std::vector<bool> pass(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) pass[i] = in[i] > lo && in[i] < s;
  auto values = deq.data();
  return Tensor::from_op(x.shape(), std::vector<double>(values.begin(), values.end()), {x},
                         [pass = std::move(pass)](std::span<const double> g, std::span<double* const> gin) {
                           for (std::size_t i = 0; i < g.size(); ++i)
                             if (pass[i]) gin[0][i] += g[i];
                         });
}

FocusInterval::FocusInterval() : FocusInterval(0.0, 1.0) {}

FocusInterval::FocusInterval(double lower, double upper)
    : b1(Tensor::scalar(lower)), b2(Tensor::scalar(upper)) {
  b1.set_requires_grad(true);
  b2.set_requires_grad(true);
  project();
}

FocusInterval FocusInterval::from_observed_max(double observed_max) {
  return FocusInterval(0.0, std::clamp(observed_max, kMinGap, 1.0));
}

void FocusInterval::project() {
  double lo = b1.item();
  double hi = b2.item();
  lo = std::clamp(lo, 0.0, 1.0 - kMinGap);
  hi = std::clamp(hi, lo + kMinGap, 1.0);
  b1.mutable_data()[0] = lo;
  b2.mutable_data()[0] = hi;
}

Tensor dfq_quant(const Tensor& x, const FocusInterval& itv, int bits) {
  if (bits < 2 || bits > 16) throw ContractError("bit-width must be in [2, 16]");
  const double lo = itv.lower();
  const double hi = itv.upper();
  if (!(lo >= 0.0 && hi <= 1.0 && hi - lo >= FocusInterval::kMinGap * (1.0 - 1e-9))) {
    throw ContractError("focus interval must satisfy 0 <= b1 < b2 <= 1");
  }
  const auto levels = static_cast<double>((std::int64_t{1} << bits) - 1);
  const double s = (hi - lo) / levels;
  auto in = x.data();
  std::vector<double> out(in.size());
  // Region tag per element: -1 below, +1 above, else the code fraction q/L
  // (needed for the endpoint gradients).
  std::vector<double> frac(in.size());
  std::vector<signed char> region(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    const double v = in[i];
    if (v < lo) {
      out[i] = 0.0;
      region[i] = -1;
    } else if (v > hi) {
      out[i] = hi;
      region[i] = 1;
    } else {
      const double q = std::clamp(round_half_even((v - lo) / s), 0.0, levels);
      out[i] = lo + q * s;
      frac[i] = q / levels;
      region[i] = 0;
    }
  }
  return Tensor::from_op(x.shape(), std::move(out), {x, itv.b1, itv.b2},
                         [frac = std::move(frac), region = std::move(region)](std::span<const double> g,
                                                                             std::span<double* const> gin) {
                           double g1 = 0.0;
                           double g2 = 0.0;
                           for (std::size_t i = 0; i < g.size(); ++i) {
                             if (region[i] == 0) {
                               if (gin[0]) gin[0][i] += g[i];
                               g1 += g[i] * (1.0 - frac[i]);
                               g2 += g[i] * frac[i];
                             } else if (region[i] > 0) {
                               g2 += g[i];
                             }
                           }
                           if (gin[1]) gin[1][0] += g1;
                           if (gin[2]) gin[2][0] += g2;
                         });
}

QuantParams calibrate_minmax(const Tensor& samples, int bits, Granularity granularity, std::size_t axis) {
  if (!samples.defined() || samples.numel() == 0) throw ContractError("calibration batch is empty");
  if (bits < 2 || bits > 16) throw ContractError("bit-width must be in [2, 16]");
  const Shape& shape = samples.shape();
  std::size_t channels = 1;
  std::size_t inner = 1;
  if (granularity == Granularity::per_channel) {
    if (axis >= shape.size()) throw DimensionError("calibration axis out of range for " + shape_str(shape));
    channels = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  }
  std::vector<double> lo(channels, 0.0);
  std::vector<double> hi(channels, 0.0);
  auto in = samples.data();
  for (std::size_t i = 0; i < in.size(); ++i) {
    const std::size_t c = granularity == Granularity::per_channel ? (i / inner) % channels : 0;
    lo[c] = std::min(lo[c], in[i]);
    hi[c] = std::max(hi[c], in[i]);
  }
  const std::int64_t qmax = (std::int64_t{1} << bits) - 1;
  std::vector<double> scale(channels);
  std::vector<std::int64_t> zero(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    const double s = std::max((hi[c] - lo[c]) / static_cast<double>(qmax), kMinScale);
    scale[c] = s;
    zero[c] = clamp_code(round_half_even(-lo[c] / s), qmax);
  }
  if (granularity == Granularity::per_channel) {
    return QuantParams::channel_wise(std::move(scale), std::move(zero), bits, axis);
  }
  return QuantParams::tensor_wise(scale[0], zero[0], bits);
}

}  // namespace vitptq::quant
