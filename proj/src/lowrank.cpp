// SPDX-License-Identifier: Apache-2.0
#include "vitptq/lowrank.hpp"

#include <algorithm>
#include <numeric>

#include "vitptq/errors.hpp"
#include "vitptq/recon.hpp"

namespace vitptq::lowrank {

namespace {

Tensor quantize_input(const Tensor& x, const LinearLayer& layer) {
  if (!layer.input_qp) return x;
  quant::QuantParams p = *layer.input_qp;
  if (p.granularity == quant::Granularity::per_channel) p.axis = x.rank() - 1;
  return quant::fake_quant(x, p);
}

std::string stream_name(std::string_view kind, std::size_t block_index, const std::string& layer) {
  return std::string(kind) + "/block" + std::to_string(block_index) + "." + layer;
}

BlockBatch take(const Tensor& inputs, const Tensor& targets, std::span<const std::size_t> rows) {
  return {gather_rows(inputs, rows), gather_rows(targets, rows)};
}

}  // namespace

Tensor adapter_forward(const Tensor& x, const LinearLayer& layer, bool require_calibration) {
  if (!layer.adapter) throw StateError(layer.name + ": no adapter attached");
  if (require_calibration && (!layer.weight_qp || !layer.input_qp)) {
    throw StateError(layer.name + ": adapter forward requires calibrated weight and input quantizers");
  }
  if (x.rank() < 1 || x.shape().back() != layer.in_features()) {
    throw DimensionError(layer.name + ": input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(layer.weight.shape()));
  }
  Tensor w = layer.effective_weight();
  if (layer.weight_qp) w = quant::fake_quant(w, *layer.weight_qp);
  Tensor y = ops::matmul(quantize_input(x, layer), w);
  if (layer.bias) y = ops::add(y, *layer.bias);
  return y;
}

Tensor mixed_forward(const Tensor& x, const LinearLayer& layer, const RankSearchState& st) {
  if (x.rank() < 1 || x.shape().back() != layer.in_features()) {
    throw DimensionError(layer.name + ": input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(layer.weight.shape()));
  }
  const Tensor xq = quantize_input(x, layer);
  const Tensor w = layer.weight_qp ? quant::fake_quant(layer.weight, *layer.weight_qp) : layer.weight;
  Tensor y = ops::add(ops::matmul(xq, w), mixed_correction(xq, st));
  if (layer.bias) y = ops::add(y, *layer.bias);
  return y;
}

std::vector<std::size_t> feasible_candidates(const std::vector<std::size_t>& candidates, std::size_t in, std::size_t out,
                                             std::vector<std::string>* warnings) {
  const std::size_t limit = std::min(in, out);
  std::vector<std::size_t> kept;
  for (std::size_t r : candidates) {
    if (r == 0) throw ContractError("candidate rank must be positive");
    if (r >= limit) {
      if (warnings) {
        warnings->push_back("rank " + std::to_string(r) + " dropped: not below min(in, out) = " + std::to_string(limit));
      }
      continue;
    }
    kept.push_back(r);
  }
  return kept;
}

std::size_t select_rank(const RankSearchState& st) {
  if (st.size() == 0) throw StateError("rank search state has no candidates");
  auto a = st.alpha.data();
  std::size_t best = 0;
  for (std::size_t j = 1; j < st.size(); ++j) {
    if (a[j] > a[best] || (a[j] == a[best] && st.candidates[j] < st.candidates[best])) best = j;
  }
  return st.candidates[best];
}

BilevelOptimizer BilevelOptimizer::for_block(const TransformerBlock& blk, double weight_lr, double arch_lr) {
  std::vector<Tensor> weights;
  std::vector<Tensor> arch;
  for (const LinearLayer* l : blk.linears()) {
    if (!l->search) continue;
    for (const Tensor& t : l->search->adapter_parameters()) weights.push_back(t);
    arch.push_back(l->search->alpha);
  }
  std::vector<Tensor> all = weights;
  all.insert(all.end(), arch.begin(), arch.end());
  if (blk.softmax_q && blk.softmax_q->kind == SoftmaxQuantKind::dfq) {
    all.push_back(blk.softmax_q->interval.b1);
    all.push_back(blk.softmax_q->interval.b2);
  }
  Adam::Options wopt;
  wopt.lr = weight_lr;
  Adam::Options aopt;
  aopt.lr = arch_lr;
  return {Adam(std::move(weights), wopt), Adam(std::move(arch), aopt), std::move(all)};
}

BilevelLosses bilevel_step(TransformerBlock& blk, const BlockBatch& train, const BlockBatch& val, BilevelOptimizer& opt) {
  auto zero = [&] {
    for (Tensor& t : opt.all) t.zero_grad();
  };
  BilevelLosses out;
  zero();
  Tensor lt = recon::block_recon_loss(train.inputs, train.targets, blk);
  out.train = lt.item();
  lt.backward();
  opt.weights.step();

  zero();
  Tensor lv = recon::block_recon_loss(val.inputs, val.targets, blk);
  out.val = lv.item();
  lv.backward();
  opt.arch.step();
  zero();
  return out;
}

void attach_search(TransformerBlock& blk, const SearchConfig& cfg, std::size_t block_index) {
  for (LinearLayer* l : blk.linears()) {
    const auto cands = feasible_candidates(cfg.candidates, l->in_features(), l->out_features());
    if (cands.empty()) {
      l->search.reset();
      continue;
    }
    Rng init_rng = Rng::stream(cfg.seed, stream_name("init", block_index, l->name));
    l->search = RankSearchState::init(l->in_features(), l->out_features(), cands, init_rng,
                                      Rng::stream(cfg.seed, stream_name("droppath", block_index, l->name)),
                                      cfg.drop_path_rate);
    l->adapter.reset();
  }
}

std::vector<LayerSearchReport> search_block_ranks(TransformerBlock& blk, std::size_t block_index, const Tensor& inputs,
                                                  const Tensor& targets, const SearchConfig& cfg) {
  const std::size_t n = inputs.dim(0);
  if (n < 2) throw ContractError("rank search needs at least two calibration samples to split");
  if (targets.shape() != inputs.shape()) {
    throw DimensionError("search targets " + shape_str(targets.shape()) + " do not match inputs " +
                         shape_str(inputs.shape()));
  }

  std::vector<LayerSearchReport> reports;
  for (LinearLayer* l : blk.linears()) {
    LayerSearchReport r;
    r.layer = l->name;
    r.in_features = l->in_features();
    r.out_features = l->out_features();
    r.candidates = feasible_candidates(cfg.candidates, r.in_features, r.out_features, &r.warnings);
    reports.push_back(std::move(r));
  }
  attach_search(blk, cfg, block_index);

  Rng split_rng = Rng::stream(cfg.seed, "split/block" + std::to_string(block_index));
  const std::vector<std::size_t> perm = split_rng.permutation(n);
  const std::size_t half = n / 2;
  const std::vector<std::size_t> train_pool(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(half));
  const std::vector<std::size_t> val_pool(perm.begin() + static_cast<std::ptrdiff_t>(half), perm.end());

  Rng batch_rng = Rng::stream(cfg.seed, "batch/search/block" + std::to_string(block_index));
  BilevelOptimizer opt = BilevelOptimizer::for_block(blk, cfg.weight_lr, cfg.arch_lr);
  const auto layers = blk.linears();

  auto record = [&](std::size_t it) {
    for (std::size_t k = 0; k < layers.size(); ++k) {
      if (!layers[k]->search) continue;
      auto a = layers[k]->search->alpha.data();
      reports[k].trajectory_iters.push_back(it);
      reports[k].alpha_trajectory.emplace_back(a.begin(), a.end());
    }
  };

  if (!opt.arch.params().empty()) {
    record(0);
    for (std::size_t it = 0; it < cfg.iters; ++it) {
      const auto tr = batch_rng.sample(train_pool, cfg.batch_size);
      const auto va = batch_rng.sample(val_pool, cfg.batch_size);
      bilevel_step(blk, take(inputs, targets, tr), take(inputs, targets, va), opt);
      if (cfg.record_every > 0 && (it + 1) % cfg.record_every == 0) record(it + 1);
    }
  }

  for (std::size_t k = 0; k < layers.size(); ++k) {
    LinearLayer& l = *layers[k];
    if (!l.search) {
      reports[k].chosen_rank = 0;
      l.adapter.reset();
      continue;
    }
    auto a = l.search->alpha.data();
    reports[k].final_alpha.assign(a.begin(), a.end());
    reports[k].search_overhead = l.search->overhead();
    const std::size_t rank = select_rank(*l.search);
    reports[k].chosen_rank = rank;
    Rng rng = Rng::stream(cfg.seed, stream_name("reinit", block_index, l.name));
    l.adapter = LowRankAdapter::init(l.in_features(), l.out_features(), rank, rng);
    l.search.reset();
  }
  return reports;
}

void install_fixed_rank(TransformerBlock& blk, std::size_t block_index, std::size_t rank, std::uint64_t seed) {
  if (rank == 0) throw ContractError("fixed rank must be positive");
  for (LinearLayer* l : blk.linears()) {
    const std::size_t limit = std::min(l->in_features(), l->out_features());
    const std::size_t r = std::min(rank, limit > 1 ? limit - 1 : std::size_t{1});
    Rng rng = Rng::stream(seed, stream_name("reinit", block_index, l->name));
    l->adapter = LowRankAdapter::init(l->in_features(), l->out_features(), r, rng);
    l->search.reset();
  }
}

}  // namespace vitptq::lowrank
