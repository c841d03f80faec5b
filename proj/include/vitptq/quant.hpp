// SPDX-License-Identifier: Apache-2.0
//
// Uniform, log2 and dynamic-focusing quantizers. All rounding is
// round-half-to-even. The fake_* functions return quantize-dequantize values
// and are differentiable through a straight-through estimator.
#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "vitptq/tensor.hpp"

namespace vitptq::quant {

enum class Granularity { per_tensor, per_channel };

struct QuantParams {
  std::vector<double> scale;             // one entry, or one per channel
  std::vector<std::int64_t> zero_point;  // same length as scale
  int bits = 8;
  Granularity granularity = Granularity::per_tensor;
  std::size_t axis = 0;  // channel axis when per_channel

  static QuantParams tensor_wise(double scale, std::int64_t zero_point, int bits);
  static QuantParams channel_wise(std::vector<double> scale, std::vector<std::int64_t> zero_point, int bits,
                                  std::size_t axis);

  std::int64_t qmax() const { return (std::int64_t{1} << bits) - 1; }
  std::size_t channels() const { return scale.size(); }
  /// Throws ContractError unless s > 0, 0 <= z <= qmax, 2 <= bits <= 16.
  void validate() const;
  /// Throws DimensionError if per-channel parameters do not fit `shape`.
  void check_shape(const Shape& shape) const;
};

/// Integer codes produced by a quantizer.
struct IntTensor {
  Shape shape;
  std::vector<std::int64_t> codes;
};

/// Scale/zero-point floor for degenerate (all-zero) ranges.
inline constexpr double kMinScale = 1e-8;

IntTensor quant_uniform(const Tensor& x, const QuantParams& p);
Tensor dequant_uniform(const IntTensor& q, const QuantParams& p);
/// dequant(quant(x)); gradient passes where x is strictly inside the
/// representable range [s(0 - z), s(qmax - z)] and is zero elsewhere.
Tensor fake_quant(const Tensor& x, const QuantParams& p);

/// clamp(round(-log2(x / s)), 0, qmax); x == 0 maps to qmax. Only the scale
/// of `p` is used (zero point ignored). Requires x >= 0.
IntTensor quant_log2(const Tensor& x, const QuantParams& p);
Tensor dequant_log2(const IntTensor& q, const QuantParams& p);
/// Straight-through inside [s 2^-qmax, s].
Tensor fake_quant_log2(const Tensor& x, const QuantParams& p);

/// Learnable focus interval [b1, b2] of the dynamic focusing quantizer. Both
/// endpoints are scalar leaf tensors with requires_grad set.
struct FocusInterval {
  Tensor b1;
  Tensor b2;

  static constexpr double kMinGap = 1e-3;

  FocusInterval();
  FocusInterval(double lower, double upper);
  /// Starts as plain uniform quantization over [0, min(observed_max, 1)].
  static FocusInterval from_observed_max(double observed_max);

  double lower() const { return b1.item(); }
  double upper() const { return b2.item(); }
  /// Restores 0 <= b1 < b2 <= 1 with b2 - b1 >= kMinGap.
  void project();
  FocusInterval copy() const { return FocusInterval(lower(), upper()); }
};

/// Dynamic focusing quantizer for post-Softmax values in [0, 1]:
///   x < b1        -> 0
///   b1 <= x <= b2 -> b1 + s * round((x - b1) / s),  s = (b2 - b1) / (2^k - 1)
///   x > b2        -> b2
/// d/dx is straight-through inside [b1, b2]. d/db1 and d/db2 differentiate
/// the dequantized value with the integer code held constant.
Tensor dfq_quant(const Tensor& x, const FocusInterval& itv, int bits);

/// Min-max calibration over the sample batch. The observed range is widened
/// to contain zero; s = (max - min) / (2^k - 1) floored at kMinScale and
/// z = clamp(round(-min / s), 0, 2^k - 1). Per-channel statistics are taken
/// along `axis` of `samples`.
QuantParams calibrate_minmax(const Tensor& samples, int bits, Granularity granularity, std::size_t axis = 0);

}  // namespace vitptq::quant
