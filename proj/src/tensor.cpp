// SPDX-License-Identifier: Apache-2.0
#include "vitptq/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "vitptq/errors.hpp"
#include "vitptq/rng.hpp"

namespace vitptq {

namespace {

thread_local bool g_grad_enabled = true;
thread_local std::uint64_t g_node_seq = 0;

}  // namespace

std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->data.assign(numel_of(shape), fill);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> data) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (numel_of(shape) != data.size()) {
    throw DimensionError("data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_str(shape));
  }
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

Tensor Tensor::eye(std::size_t n) {
  Tensor t({n, n});
  auto d = t.mutable_data();
  for (std::size_t i = 0; i < n; ++i) d[i * n + i] = 1.0;
  return t;
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev) {
  Tensor t(std::move(shape));
  for (double& v : t.mutable_data()) v = rng.normal(0.0, stddev);
  return t;
}

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  for (double& v : t.mutable_data()) v = rng.uniform(lo, hi);
  return t;
}

Tensor Tensor::from_op(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                       BackwardFn backward) {
  Tensor out(std::move(shape), std::move(data));
  if (!g_grad_enabled) return out;
  bool any = false;
  for (const Tensor& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  auto node = std::make_shared<detail::Node>();
  node->inputs.reserve(inputs.size());
  for (const Tensor& in : inputs) node->inputs.push_back(in.impl_);
  node->backward = std::move(backward);
  node->seq = ++g_node_seq;
  out.impl_->node = std::move(node);
  out.impl_->requires_grad = true;
  return out;
}

detail::TensorImpl& Tensor::checked() const {
  if (!impl_) throw StateError("use of an undefined tensor");
  return *impl_;
}

const Shape& Tensor::shape() const { return checked().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return checked().data.size(); }

std::span<const double> Tensor::data() const& { return checked().data; }

std::span<double> Tensor::mutable_data() & {
  auto& impl = checked();
  if (impl.node) throw StateError("mutable_data() on a non-leaf tensor");
  return impl.data;
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return data()[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const Shape& s = shape();
  if (index.size() != s.size()) throw DimensionError("index rank does not match " + shape_str(s));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= s[axis]) throw DimensionError("index out of range for " + shape_str(s));
    flat = flat * s[axis] + i;
    ++axis;
  }
  return data()[flat];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  auto& impl = checked();
  if (impl.node && !on) throw StateError("cannot clear requires_grad on a taped tensor");
  impl.requires_grad = on;
  return *this;
}

bool Tensor::is_leaf() const { return checked().node == nullptr; }

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw StateError("tensor has no gradient");
  return impl_->grad;
}

Tensor Tensor::grad_tensor() const {
  auto g = grad();
  return Tensor(shape(), std::vector<double>(g.begin(), g.end()));
}

void Tensor::zero_grad() { checked().grad.clear(); }

Tensor Tensor::detach() const {
  const auto& impl = checked();
  return Tensor(impl.shape, impl.data);
}

void Tensor::backward() const {
  const auto& root = checked();
  if (root.data.size() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " + shape_str(root.shape));
  }
  if (!root.requires_grad) throw StateError("backward() on a tensor that does not require grad");
  if (!root.node) {
    if (impl_->grad.empty()) impl_->grad.assign(1, 0.0);
    impl_->grad[0] += 1.0;
    return;
  }

  // Collect reachable nodes.
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<const detail::TensorImpl*> seen;
  std::vector<detail::TensorImpl*> stack{impl_.get()};
  while (!stack.empty()) {
    auto* t = stack.back();
    stack.pop_back();
    if (!t->node || !seen.insert(t).second) continue;
    order.push_back(t);
    for (auto& in : t->node->inputs) {
      if (in->node && !seen.count(in.get())) stack.push_back(in.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const detail::TensorImpl* a, const detail::TensorImpl* b) { return a->node->seq > b->node->seq; });

  // Intermediate gradients live only for the duration of the sweep.
  for (auto* t : order) t->grad.assign(t->data.size(), 0.0);
  impl_->grad[0] = 1.0;

  std::vector<double*> gin;
  for (auto* t : order) {
    auto& node = *t->node;
    gin.assign(node.inputs.size(), nullptr);
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      auto& in = *node.inputs[i];
      if (!in.requires_grad) continue;
      if (in.grad.empty()) in.grad.assign(in.data.size(), 0.0);
      gin[i] = in.grad.data();
    }
    node.backward(t->grad, gin);
  }
  for (auto* t : order) {
    t->grad.clear();
    t->grad.shrink_to_fit();
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

}  // namespace vitptq
