// SPDX-License-Identifier: Apache-2.0
#include "vitptq/adapter.hpp"

#include <cmath>

#include "vitptq/errors.hpp"
#include "vitptq/ops.hpp"

namespace vitptq::lowrank {

LowRankAdapter LowRankAdapter::init(std::size_t in, std::size_t out, std::size_t rank, Rng& rng, double stddev) {
  if (rank == 0) throw ContractError("adapter rank must be positive");
  LowRankAdapter a;
  a.down = Tensor::randn({in, rank}, rng, stddev);
  a.up = Tensor::zeros({rank, out});
  a.down.set_requires_grad(true);
  a.up.set_requires_grad(true);
  return a;
}

Tensor LowRankAdapter::delta() const { return ops::matmul(down, up); }

RankSearchState RankSearchState::init(std::size_t in, std::size_t out, const std::vector<std::size_t>& candidates,
                                      Rng& init_rng, Rng drop_rng, double drop_path_rate) {
  if (candidates.empty()) throw ContractError("rank search needs at least one candidate");
  if (drop_path_rate < 0.0 || drop_path_rate >= 1.0) throw ContractError("drop_path_rate must lie in [0, 1)");
  RankSearchState st;
  st.candidates = candidates;
  st.alpha = Tensor::zeros({candidates.size()});
  st.alpha.set_requires_grad(true);
  for (std::size_t r : candidates) st.adapters.push_back(LowRankAdapter::init(in, out, r, init_rng));
  st.drop_path_rate = drop_path_rate;
  st.drop_rng = std::move(drop_rng);
  return st;
}

std::vector<double> RankSearchState::weights() const {
  NoGradGuard guard;
  const Tensor sm = ops::softmax(alpha, 0);
  auto w = sm.data();
  return {w.begin(), w.end()};
}

std::size_t RankSearchState::overhead() const {
  std::size_t n = 0;
  for (const auto& a : adapters) n += a.parameter_count();
  return n;
}

std::vector<Tensor> RankSearchState::adapter_parameters() const {
  std::vector<Tensor> p;
  for (const auto& a : adapters) {
    p.push_back(a.down);
    p.push_back(a.up);
  }
  return p;
}

Tensor mixed_correction(const Tensor& xhat, const RankSearchState& st) {
  const Tensor w = ops::softmax(st.alpha, 0);
  const bool drop = st.training && st.drop_path_rate > 0.0;
  const double keep_scale = drop ? 1.0 / (1.0 - st.drop_path_rate) : 1.0;
  Tensor total;
  for (std::size_t j = 0; j < st.size(); ++j) {
    // Draw for every candidate so the stream position is independent of outcomes.
    if (drop && st.drop_rng.bernoulli(st.drop_path_rate)) continue;
    const auto& a = st.adapters[j];
    Tensor path = ops::matmul(ops::matmul(xhat, a.down), a.up);
    Tensor term = ops::mul(path, ops::slice(w, 0, j, 1));
    if (keep_scale != 1.0) term = ops::scale(term, keep_scale);
    total = total.defined() ? ops::add(total, term) : term;
  }
  if (!total.defined()) {
    Shape s = xhat.shape();
    s.back() = st.adapters.front().out_features();
    total = Tensor::zeros(std::move(s));
  }
  return total;
}

}  // namespace vitptq::lowrank
