// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major float64 tensors with a reverse-mode gradient tape.
//
// Every tensor produced by an operation on a grad-requiring input records a
// node holding its inputs and a backward rule. Nodes carry a monotonically
// increasing sequence number, so sorting the reachable nodes by that number
// reproduces the order in which they were taped; backward() walks it in
// reverse. Gradients accumulate additively into leaf tensors until
// zero_grad() is called.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace vitptq {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

class Rng;

/// Backward rule: receives the output gradient and one gradient buffer per
/// input (nullptr when that input does not need a gradient). Rules must
/// accumulate (+=) into the buffers.
using BackwardFn = std::function<void(std::span<const double> grad_out, std::span<double* const> grad_in)>;

namespace detail {

struct Node;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until populated
  bool requires_grad = false;
  std::shared_ptr<Node> node;  // producer; null for leaves
};

struct Node {
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
  std::uint64_t seq = 0;
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor eye(std::size_t n);
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0);
  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi);

  /// Creates the result of a differentiable operation. A tape node is
  /// recorded only if grad mode is on and some input requires a gradient.
  static Tensor from_op(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                        BackwardFn backward);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const&;
  /// Would dangle: the storage dies with the temporary.
  std::span<const double> data() const&& = delete;
  /// Writable view; only permitted on leaves (parameters and inputs).
  std::span<double> mutable_data() &;
  std::span<double> mutable_data() && = delete;

  double item() const;
  double operator[](std::size_t flat) const { return data()[flat]; }
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on = true);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  Tensor grad_tensor() const;
  void zero_grad();

  /// Copy of the values with no gradient history.
  Tensor detach() const;

  /// Reverse sweep from a scalar; accumulates into every reachable leaf that
  /// requires a gradient.
  void backward() const;

  bool same_object(const Tensor& other) const { return impl_ == other.impl_; }
  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  detail::TensorImpl& checked() const;

  std::shared_ptr<detail::TensorImpl> impl_;
};

bool grad_enabled();

/// Disables tape recording for its lifetime (thread-local).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

}  // namespace vitptq
