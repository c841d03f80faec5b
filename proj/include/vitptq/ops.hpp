// SPDX-License-Identifier: Apache-2.0
//
// Differentiable tensor operations. Binary elementwise ops broadcast their
// right operand when it has the same shape, a trailing-suffix shape (bias
// style), or a single element.
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "vitptq/tensor.hpp"

namespace vitptq::ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor square(const Tensor& a);
Tensor sqrt(const Tensor& a);

/// [m,k]x[k,n]; [...,m,k]x[k,n] (shared right operand); [B,m,k]x[B,k,n].
Tensor matmul(const Tensor& a, const Tensor& b);
/// Swaps the last two axes.
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Reduces (and removes) one axis.
Tensor sum_axis(const Tensor& a, std::size_t axis);
Tensor mean_axis(const Tensor& a, std::size_t axis);

Tensor frobenius_norm(const Tensor& a);
/// Frobenius norm of every leading-axis slice: [B, ...] -> [B].
Tensor frobenius_norm_batched(const Tensor& a);

/// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, std::size_t axis);
/// Normalizes over the last axis (biased variance), then applies gamma/beta.
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

enum class GeluKind { tanh, erf };
/// GELU; the default is the tanh approximation
/// 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
Tensor gelu(const Tensor& x, GeluKind kind = GeluKind::tanh);

/// Mean negative log-likelihood of `labels` under softmax(logits), logits [B,C].
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

}  // namespace vitptq::ops

namespace vitptq {

inline Tensor operator+(const Tensor& a, const Tensor& b) { return ops::add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return ops::sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return ops::mul(a, b); }
inline Tensor operator*(const Tensor& a, double c) { return ops::scale(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return ops::scale(a, c); }

}  // namespace vitptq
