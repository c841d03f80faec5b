// SPDX-License-Identifier: Apache-2.0
#include "vitptq/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "vitptq/errors.hpp"

namespace vitptq::ops {

namespace {

enum class Broadcast { same, suffix, single };

Broadcast classify(const Tensor& a, const Tensor& b, const char* op) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa == sb) return Broadcast::same;
  if (b.numel() == 1) return Broadcast::single;
  if (sb.size() <= sa.size() && std::equal(sb.rbegin(), sb.rend(), sa.rbegin())) return Broadcast::suffix;
  throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(sb) + " onto " + shape_str(sa));
}

// Reduces a gradient over the broadcast pattern of `b` and accumulates it.
void accumulate_broadcast(Broadcast kind, std::span<const double> g, double* gb, std::size_t nb) {
  switch (kind) {
    case Broadcast::same:
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      break;
    case Broadcast::suffix:
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % nb] += g[i];
      break;
    case Broadcast::single: {
      double s = 0.0;
      for (double v : g) s += v;
      gb[0] += s;
      break;
    }
  }
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t n = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using Map = Eigen::Map<RowMatrix>;

Eigen::Index idx(std::size_t v) { return static_cast<Eigen::Index>(v); }

// C[m,n] += A[m,k] * B[k,n]
void gemm_nn(const double* A, const double* B, double* C, std::size_t m, std::size_t k, std::size_t n) {
  Map(C, idx(m), idx(n)).noalias() += ConstMap(A, idx(m), idx(k)) * ConstMap(B, idx(k), idx(n));
}

// C[m,k] += G[m,n] * B[k,n]^T
void gemm_nt(const double* G, const double* B, double* C, std::size_t m, std::size_t k, std::size_t n) {
  Map(C, idx(m), idx(k)).noalias() += ConstMap(G, idx(m), idx(n)) * ConstMap(B, idx(k), idx(n)).transpose();
}

// C[k,n] += A[m,k]^T * G[m,n]
void gemm_tn(const double* A, const double* G, double* C, std::size_t m, std::size_t k, std::size_t n) {
  Map(C, idx(k), idx(n)).noalias() += ConstMap(A, idx(m), idx(k)).transpose() * ConstMap(G, idx(m), idx(n));
}

template <class F, class DF>
Tensor unary(const Tensor& a, F f, DF df) {
  auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return Tensor::from_op(a.shape(), std::move(out), {a}, [a, df](std::span<const double> g, std::span<double* const> gin) {
    auto x = a.data();
    for (std::size_t i = 0; i < x.size(); ++i) gin[0][i] += g[i] * df(x[i]);
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  const Broadcast kind = classify(a, b, "add");
  auto x = a.data();
  auto y = b.data();
  const std::size_t nb = y.size();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[kind == Broadcast::single ? 0 : i % nb];
  return Tensor::from_op(a.shape(), std::move(out), {a, b}, [kind, nb](std::span<const double> g, std::span<double* const> gin) {
    if (gin[0])
      for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
    if (gin[1]) accumulate_broadcast(kind, g, gin[1], nb);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const Broadcast kind = classify(a, b, "sub");
  auto x = a.data();
  auto y = b.data();
  const std::size_t nb = y.size();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[kind == Broadcast::single ? 0 : i % nb];
  return Tensor::from_op(a.shape(), std::move(out), {a, b}, [kind, nb](std::span<const double> g, std::span<double* const> gin) {
    if (gin[0])
      for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
    if (gin[1]) {
      std::vector<double> ng(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) ng[i] = -g[i];
      accumulate_broadcast(kind, ng, gin[1], nb);
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const Broadcast kind = classify(a, b, "mul");
  auto x = a.data();
  auto y = b.data();
  const std::size_t nb = y.size();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[kind == Broadcast::single ? 0 : i % nb];
  return Tensor::from_op(a.shape(), std::move(out), {a, b},
                         [a, b, kind, nb](std::span<const double> g, std::span<double* const> gin) {
                           auto x = a.data();
                           auto y = b.data();
                           if (gin[0]) {
                             for (std::size_t i = 0; i < g.size(); ++i)
                               gin[0][i] += g[i] * y[kind == Broadcast::single ? 0 : i % nb];
                           }
                           if (gin[1]) {
                             std::vector<double> gy(g.size());
                             for (std::size_t i = 0; i < g.size(); ++i) gy[i] = g[i] * x[i];
                             accumulate_broadcast(kind, gy, gin[1], nb);
                           }
                         });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor scale(const Tensor& a, double c) {
  return unary(a, [c](double v) { return c * v; }, [c](double) { return c; });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary(a, [c](double v) { return v + c; }, [](double) { return 1.0; });
}

Tensor square(const Tensor& a) {
  return unary(a, [](double v) { return v * v; }, [](double v) { return 2.0 * v; });
}

Tensor sqrt(const Tensor& a) {
  for (double v : a.data()) {
    if (v < 0.0) throw ContractError("sqrt of a negative value");
  }
  return unary(a, [](double v) { return std::sqrt(v); }, [](double v) { return v > 0.0 ? 0.5 / std::sqrt(v) : 0.0; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  auto mismatch = [&] { return DimensionError("matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb)); };
  if (sa.size() < 2 || sb.size() < 2) throw mismatch();

  const std::size_t m = sa[sa.size() - 2];
  const std::size_t k = sa.back();
  if (sb[sb.size() - 2] != k) throw mismatch();
  const std::size_t n = sb.back();

  std::size_t batch = 1;
  bool shared_rhs = false;
  if (sb.size() == 2) {
    // Flatten any leading axes of `a` into rows.
    shared_rhs = true;
    for (std::size_t i = 0; i + 2 < sa.size(); ++i) batch *= sa[i];
  } else {
    if (sa.size() != sb.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin())) throw mismatch();
    for (std::size_t i = 0; i + 2 < sa.size(); ++i) batch *= sa[i];
  }

  Shape out_shape(sa.begin(), sa.end() - 1);
  out_shape.push_back(n);
  std::vector<double> out(batch * m * n, 0.0);
  const double* A = a.data().data();
  const double* B = b.data().data();
  if (shared_rhs) {
    gemm_nn(A, B, out.data(), batch * m, k, n);
  } else {
    for (std::size_t t = 0; t < batch; ++t) gemm_nn(A + t * m * k, B + t * k * n, out.data() + t * m * n, m, k, n);
  }

  return Tensor::from_op(std::move(out_shape), std::move(out), {a, b},
                         [a, b, batch, m, k, n, shared_rhs](std::span<const double> g, std::span<double* const> gin) {
                           const double* A = a.data().data();
                           const double* B = b.data().data();
                           if (shared_rhs) {
                             if (gin[0]) gemm_nt(g.data(), B, gin[0], batch * m, k, n);
                             if (gin[1]) gemm_tn(A, g.data(), gin[1], batch * m, k, n);
                             return;
                           }
                           for (std::size_t t = 0; t < batch; ++t) {
                             const double* gt = g.data() + t * m * n;
                             if (gin[0]) gemm_nt(gt, B + t * k * n, gin[0] + t * m * k, m, k, n);
                             if (gin[1]) gemm_tn(A + t * m * k, gt, gin[1] + t * k * n, m, k, n);
                           }
                         });
}

Tensor transpose(const Tensor& a) {
  const Shape& s = a.shape();
  if (s.size() < 2) throw DimensionError("transpose needs rank >= 2, got " + shape_str(s));
  const std::size_t r = s[s.size() - 2];
  const std::size_t c = s.back();
  const std::size_t batch = a.numel() / (r * c);
  Shape out_shape = s;
  std::swap(out_shape[s.size() - 2], out_shape[s.size() - 1]);
  auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t t = 0; t < batch; ++t)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[t * r * c + j * r + i] = x[t * r * c + i * c + j];
  return Tensor::from_op(std::move(out_shape), std::move(out), {a},
                         [batch, r, c](std::span<const double> g, std::span<double* const> gin) {
                           for (std::size_t t = 0; t < batch; ++t)
                             for (std::size_t i = 0; i < r; ++i)
                               for (std::size_t j = 0; j < c; ++j) gin[0][t * r * c + i * c + j] += g[t * r * c + j * r + i];
                         });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel_of(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " cannot become " + shape_str(shape));
  }
  auto x = a.data();
  return Tensor::from_op(std::move(shape), std::vector<double>(x.begin(), x.end()), {a},
                         [](std::span<const double> g, std::span<double* const> gin) {
                           for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
                         });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  const Shape& s0 = parts.front().shape();
  if (axis >= s0.size()) throw DimensionError("concat axis out of range for " + shape_str(s0));
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == s0[i];
    if (!ok) throw DimensionError("concat: " + shape_str(s) + " incompatible with " + shape_str(s0));
    widths.push_back(s[axis]);
    total += s[axis];
  }
  Shape out_shape = s0;
  out_shape[axis] = total;
  const AxisSplit sp = split_at(out_shape, axis);
  std::vector<double> out(numel_of(out_shape));
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    auto x = parts[p].data();
    const std::size_t w = widths[p] * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(x.begin() + o * w, w, out.begin() + o * total * sp.inner + offset * sp.inner);
    offset += widths[p];
  }
  return Tensor::from_op(std::move(out_shape), std::move(out), parts,
                         [widths, sp, total](std::span<const double> g, std::span<double* const> gin) {
                           std::size_t offset = 0;
                           for (std::size_t p = 0; p < widths.size(); ++p) {
                             const std::size_t w = widths[p] * sp.inner;
                             if (gin[p]) {
                               for (std::size_t o = 0; o < sp.outer; ++o) {
                                 const double* src = g.data() + o * total * sp.inner + offset * sp.inner;
                                 double* dst = gin[p] + o * w;
                                 for (std::size_t i = 0; i < w; ++i) dst[i] += src[i];
                               }
                             }
                             offset += widths[p];
                           }
                         });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape& s = a.shape();
  const AxisSplit sp = split_at(s, axis);
  if (length == 0 || start + length > sp.n) {
    throw DimensionError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") out of range for axis " + std::to_string(axis) + " of " + shape_str(s));
  }
  Shape out_shape = s;
  out_shape[axis] = length;
  auto x = a.data();
  std::vector<double> out(sp.outer * length * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(x.begin() + (o * sp.n + start) * sp.inner, length * sp.inner, out.begin() + o * length * sp.inner);
  return Tensor::from_op(std::move(out_shape), std::move(out), {a},
                         [sp, start, length](std::span<const double> g, std::span<double* const> gin) {
                           for (std::size_t o = 0; o < sp.outer; ++o) {
                             const double* src = g.data() + o * length * sp.inner;
                             double* dst = gin[0] + (o * sp.n + start) * sp.inner;
                             for (std::size_t i = 0; i < length * sp.inner; ++i) dst[i] += src[i];
                           }
                         });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  const std::size_t n = a.numel();
  return Tensor::from_op(Shape{}, {s}, {a}, [n](std::span<const double> g, std::span<double* const> gin) {
    for (std::size_t i = 0; i < n; ++i) gin[0][i] += g[0];
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor sum_axis(const Tensor& a, std::size_t axis) {
  const Shape& s = a.shape();
  const AxisSplit sp = split_at(s, axis);
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out_shape.push_back(s[i]);
  auto x = a.data();
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t j = 0; j < sp.n; ++j)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += x[(o * sp.n + j) * sp.inner + i];
  return Tensor::from_op(std::move(out_shape), std::move(out), {a}, [sp](std::span<const double> g, std::span<double* const> gin) {
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t j = 0; j < sp.n; ++j)
        for (std::size_t i = 0; i < sp.inner; ++i) gin[0][(o * sp.n + j) * sp.inner + i] += g[o * sp.inner + i];
  });
}

Tensor mean_axis(const Tensor& a, std::size_t axis) {
  return scale(sum_axis(a, axis), 1.0 / static_cast<double>(a.dim(axis)));
}

Tensor frobenius_norm(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  const double norm = std::sqrt(s);
  return Tensor::from_op(Shape{}, {norm}, {a}, [a, norm](std::span<const double> g, std::span<double* const> gin) {
    if (norm == 0.0) return;  // subgradient 0 at the origin
    auto x = a.data();
    const double f = g[0] / norm;
    for (std::size_t i = 0; i < x.size(); ++i) gin[0][i] += f * x[i];
  });
}

Tensor frobenius_norm_batched(const Tensor& a) {
  if (a.rank() < 1) throw DimensionError("frobenius_norm_batched needs a leading batch axis");
  const std::size_t batch = a.dim(0);
  const std::size_t per = a.numel() / batch;
  auto x = a.data();
  std::vector<double> norms(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    double s = 0.0;
    for (std::size_t i = 0; i < per; ++i) s += x[b * per + i] * x[b * per + i];
    norms[b] = std::sqrt(s);
  }
  std::vector<double> out = norms;
  return Tensor::from_op(Shape{batch}, std::move(out), {a},
                         [a, norms, per](std::span<const double> g, std::span<double* const> gin) {
                           auto x = a.data();
                           for (std::size_t b = 0; b < norms.size(); ++b) {
                             if (norms[b] == 0.0) continue;
                             const double f = g[b] / norms[b];
                             for (std::size_t i = 0; i < per; ++i) gin[0][b * per + i] += f * x[b * per + i];
                           }
                         });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const AxisSplit sp = split_at(x.shape(), axis);
  auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.n * sp.inner + i;
      double mx = in[base];
      for (std::size_t j = 1; j < sp.n; ++j) mx = std::max(mx, in[base + j * sp.inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < sp.n; ++j) {
        const double e = std::exp(in[base + j * sp.inner] - mx);
        out[base + j * sp.inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < sp.n; ++j) out[base + j * sp.inner] /= z;
    }
  }
  std::vector<double> y = out;
  return Tensor::from_op(x.shape(), std::move(out), {x}, [y = std::move(y), sp](std::span<const double> g, std::span<double* const> gin) {
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.n * sp.inner + i;
        double dot = 0.0;
        for (std::size_t j = 0; j < sp.n; ++j) dot += g[base + j * sp.inner] * y[base + j * sp.inner];
        for (std::size_t j = 0; j < sp.n; ++j) {
          const std::size_t k = base + j * sp.inner;
          gin[0][k] += y[k] * (g[k] - dot);
        }
      }
    }
  });
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() < 1) throw DimensionError("layernorm on a scalar");
  const std::size_t d = x.shape().back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw DimensionError("layernorm: gamma " + shape_str(gamma.shape()) + " / beta " + shape_str(beta.shape()) +
                         " do not match last dimension of " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  auto in = x.data();
  auto gm = gamma.data();
  auto bt = beta.data();
  std::vector<double> xhat(in.size());
  std::vector<double> inv_std(rows);
  std::vector<double> out(in.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * d;
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += row[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (row[c] - mu) * is;
      xhat[r * d + c] = h;
      out[r * d + c] = h * gm[c] + bt[c];
    }
  }
  return Tensor::from_op(x.shape(), std::move(out), {x, gamma, beta},
                         [gamma, xhat = std::move(xhat), inv_std = std::move(inv_std), d, rows](
                             std::span<const double> g, std::span<double* const> gin) {
                           auto gm = gamma.data();
                           const double inv_d = 1.0 / static_cast<double>(d);
                           for (std::size_t r = 0; r < rows; ++r) {
                             const double* gr = g.data() + r * d;
                             const double* hr = xhat.data() + r * d;
                             if (gin[1])
                               for (std::size_t c = 0; c < d; ++c) gin[1][c] += gr[c] * hr[c];
                             if (gin[2])
                               for (std::size_t c = 0; c < d; ++c) gin[2][c] += gr[c];
                             if (gin[0]) {
                               double mean_gh = 0.0;
                               double mean_ghh = 0.0;
                               for (std::size_t c = 0; c < d; ++c) {
                                 const double gh = gr[c] * gm[c];
                                 mean_gh += gh;
                                 mean_ghh += gh * hr[c];
                               }
                               mean_gh *= inv_d;
                               mean_ghh *= inv_d;
                               for (std::size_t c = 0; c < d; ++c) {
                                 const double gh = gr[c] * gm[c];
                                 gin[0][r * d + c] += inv_std[r] * (gh - mean_gh - hr[c] * mean_ghh);
                               }
                             }
                           }
                         });
}

Tensor gelu(const Tensor& x, GeluKind kind) {
  if (kind == GeluKind::erf) {
    return unary(
        x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)); },
        [](double v) {
          const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
          const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
          return cdf + v * pdf;
        });
  }
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double a = 0.044715;
  return unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::tanh(c * (v + a * v * v * v))); },
      [](double v) {
        const double t = std::tanh(c * (v + a * v * v * v));
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * c * (1.0 + 3.0 * a * v * v);
      });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2) throw DimensionError("cross_entropy expects [B,C] logits, got " + shape_str(logits.shape()));
  const std::size_t batch = logits.dim(0);
  const std::size_t classes = logits.dim(1);
  if (labels.size() != batch) throw DimensionError("cross_entropy: label count does not match batch");
  auto z = logits.data();
  std::vector<double> probs(z.size());
  double loss = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] >= classes) throw ContractError("cross_entropy: label out of range");
    const double* row = z.data() + b * classes;
    const double mx = *std::max_element(row, row + classes);
    double s = 0.0;
    for (std::size_t c = 0; c < classes; ++c) s += std::exp(row[c] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t c = 0; c < classes; ++c) probs[b * classes + c] = std::exp(row[c] - lse);
    loss += lse - row[labels[b]];
  }
  loss /= static_cast<double>(batch);
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  return Tensor::from_op(Shape{}, {loss}, {logits},
                         [probs = std::move(probs), lab = std::move(lab), batch, classes](
                             std::span<const double> g, std::span<double* const> gin) {
                           const double f = g[0] / static_cast<double>(batch);
                           for (std::size_t b = 0; b < batch; ++b)
                             for (std::size_t c = 0; c < classes; ++c)
                               gin[0][b * classes + c] +=
                                   f * (probs[b * classes + c] - (c == lab[b] ? 1.0 : 0.0));
                         });
}

}  // namespace vitptq::ops
