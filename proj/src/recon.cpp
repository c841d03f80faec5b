// SPDX-License-Identifier: Apache-2.0
#include "vitptq/recon.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "vitptq/errors.hpp"

namespace vitptq::recon {

namespace {

/// Copy of `fp` whose pretrained tensors never receive gradients.
ModelGraph frozen_copy(const ModelGraph& fp) {
  ModelGraph q = fp.clone();
  for (auto& [name, t] : q.named_tensors()) t.set_requires_grad(false);
  return q;
}

std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

void log_line(const ReconConfig& cfg, const std::string& msg) {
  if (cfg.log) cfg.log(msg);
}

// Runs `blk` in fp mode over the inputs and gathers every quantization site.
std::map<std::string, Tensor, std::less<>> observe_sites(const TransformerBlock& blk, const Tensor& inputs,
                                                          std::size_t chunk = 64) {
  NoGradGuard guard;
  std::map<std::string, std::vector<Tensor>, std::less<>> parts;
  const Observer obs = [&](std::string_view site, const Tensor& v) { parts[std::string(site)].push_back(v); };
  const std::size_t n = inputs.dim(0);
  for (std::size_t start = 0; start < n; start += chunk) {
    std::vector<std::size_t> rows(std::min(chunk, n - start));
    std::iota(rows.begin(), rows.end(), start);
    block_forward(gather_rows(inputs, rows), blk, Mode::fp, &obs);
  }
  std::map<std::string, Tensor, std::less<>> out;
  for (auto& [site, ts] : parts) out[site] = ts.size() == 1 ? ts.front() : ops::concat(ts, 0);
  return out;
}

Tensor head_inputs(const ModelGraph& g, const Tensor& images, std::size_t chunk = 64) {
  NoGradGuard guard;
  const std::size_t n = images.dim(0);
  std::vector<Tensor> parts;
  for (std::size_t start = 0; start < n; start += chunk) {
    std::vector<std::size_t> rows(std::min(chunk, n - start));
    std::iota(rows.begin(), rows.end(), start);
    Tensor x = embed_forward(gather_rows(images, rows), g, Mode::quant);
    for (const auto& b : g.blocks) x = block_forward(x, b, Mode::quant);
    const Tensor h = ops::layernorm(x, g.norm.gamma, g.norm.beta, g.config.ln_eps);
    parts.push_back(g.config.pooling == Pooling::cls ? ops::reshape(ops::slice(h, 1, 0, 1), {x.dim(0), x.dim(2)})
                                                     : ops::mean_axis(h, 1));
  }
  return parts.size() == 1 ? parts.front() : ops::concat(parts, 0);
}

void calibrate_head(ModelGraph& g, const Tensor& images, int bits_w, int bits_a) {
  const Tensor x = head_inputs(g, images);
  NoGradGuard guard;
  g.head.weight_qp = quant::calibrate_minmax(g.head.effective_weight(), bits_w, quant::Granularity::per_channel, 1);
  g.head.input_qp = quant::calibrate_minmax(x, bits_a, quant::Granularity::per_tensor);
}

void check_pair(const Tensor& inputs, const Tensor& targets) {
  if (!inputs.defined() || !targets.defined()) throw ContractError("empty reconstruction batch");
  if (inputs.shape() != targets.shape()) {
    throw DimensionError("reconstruction targets " + shape_str(targets.shape()) + " do not match inputs " +
                         shape_str(inputs.shape()));
  }
}

}  // namespace

double lambda_schedule(std::size_t t, const CurriculumSchedule& sched) {
  if (sched.total_iters == 0) throw ContractError("curriculum needs a positive iteration count");
  if (!(sched.lambda0 > 0.0 && sched.lambda0 <= 1.0)) throw ContractError("lambda0 must lie in (0, 1]");
  const double lam =
      sched.lambda0 + (1.0 - sched.lambda0) * static_cast<double>(t) / static_cast<double>(sched.total_iters);
  return std::min(1.0, lam);
}

std::size_t subset_size(double lambda, std::size_t n) {
  if (!(lambda > 0.0 && lambda <= 1.0)) throw ContractError("curriculum fraction must lie in (0, 1]");
  // The small slack keeps values like 0.7000000000000001 * 10 at 7.
  const double k = std::ceil(lambda * static_cast<double>(n) - 1e-9);
  return std::clamp<std::size_t>(static_cast<std::size_t>(std::max(k, 1.0)), std::min<std::size_t>(1, n), n);
}

std::vector<std::size_t> select_subset(std::span<const double> hardness, double lambda) {
  if (hardness.empty()) throw ContractError("curriculum over an empty calibration set");
  std::vector<std::size_t> idx = iota_indices(hardness.size());
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return hardness[a] < hardness[b]; });
  idx.resize(subset_size(lambda, hardness.size()));
  return idx;
}

Tensor block_recon_loss(const Tensor& inputs, const Tensor& targets, const TransformerBlock& blk) {
  check_pair(inputs, targets);
  const Tensor out = block_forward(inputs, blk, Mode::quant);
  return ops::mean(ops::frobenius_norm_batched(ops::sub(out, targets)));
}

std::vector<double> per_sample_losses(const Tensor& inputs, const Tensor& targets, const TransformerBlock& blk,
                                      std::size_t chunk) {
  check_pair(inputs, targets);
  NoGradGuard guard;
  const std::size_t n = inputs.dim(0);
  std::vector<double> out;
  out.reserve(n);
  for (std::size_t start = 0; start < n; start += chunk) {
    std::vector<std::size_t> rows(std::min(chunk, n - start));
    std::iota(rows.begin(), rows.end(), start);
    const Tensor y = block_forward(gather_rows(inputs, rows), blk, Mode::quant);
    const Tensor norms = ops::frobenius_norm_batched(ops::sub(y, gather_rows(targets, rows)));
    auto v = norms.data();
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

std::vector<std::size_t> curriculum_subset(CalibrationSet& calib, std::size_t t, const CurriculumSchedule& sched,
                                           std::size_t refresh_every, const TransformerBlock& blk) {
  if (calib.stale(t, refresh_every)) {
    calib.hardness = per_sample_losses(calib.inputs, calib.targets, blk);
    calib.hardness_age = t;
  }
  return select_subset(calib.hardness, lambda_schedule(t, sched));
}

void ReconConfig::validate() const {
  if (bits_w < 2 || bits_w > 16 || bits_a < 2 || bits_a > 16) throw ContractError("bit-widths must be in [2, 16]");
  if (batch_size == 0) throw ContractError("batch_size must be positive");
  if (rank_set.empty()) throw ContractError("rank_set must not be empty");
  for (std::size_t r : rank_set)
    if (r == 0) throw ContractError("ranks must be positive");
  if (fixed_rank && *fixed_rank == 0) throw ContractError("fixed rank must be positive");
  if (!(lambda0 > 0.0 && lambda0 <= 1.0)) throw ContractError("lambda0 must lie in (0, 1]");
  if (drop_path_rate < 0.0 || drop_path_rate >= 1.0) throw ContractError("drop_path_rate must lie in [0, 1)");
  if (adapter_lr < 0.0 || interval_lr < 0.0 || arch_lr < 0.0) throw ContractError("learning rates must be non-negative");
  if (hardness_refresh_every == 0) throw ContractError("hardness_refresh_every must be positive");
}

void calibrate_block_quantizers(TransformerBlock& blk, const Tensor& block_inputs, int bits_w, int bits_a,
                                bool use_dfq, bool channelwise_post_ln) {
  // Observe without any quantizer or compensation in the way.
  for (LinearLayer* l : blk.linears()) {
    l->weight_qp.reset();
    l->input_qp.reset();
  }
  blk.softmax_q.reset();
  const auto sites = observe_sites(blk, block_inputs);

  NoGradGuard guard;
  using quant::Granularity;
  for (LinearLayer* l : blk.linears()) {
    l->weight_qp = quant::calibrate_minmax(l->effective_weight(), bits_w, Granularity::per_channel, 1);
  }
  auto act = [&](LinearLayer& l, const char* site, bool channelwise) {
    const Tensor& v = sites.at(site);
    l.input_qp = channelwise ? quant::calibrate_minmax(v, bits_a, Granularity::per_channel, v.rank() - 1)
                             : quant::calibrate_minmax(v, bits_a, Granularity::per_tensor);
  };
  act(blk.qkv, "qkv.in", channelwise_post_ln);
  act(blk.proj, "proj.in", false);
  act(blk.fc1, "fc1.in", channelwise_post_ln);
  act(blk.fc2, "fc2.in", false);

  const Tensor& probs = sites.at("softmax");
  SoftmaxQuantizer sq;
  sq.bits = bits_a;
  if (use_dfq) {
    auto p = probs.data();
    sq.kind = SoftmaxQuantKind::dfq;
    sq.interval = quant::FocusInterval::from_observed_max(*std::max_element(p.begin(), p.end()));
  } else {
    sq.kind = SoftmaxQuantKind::uniform;
    sq.fixed = quant::calibrate_minmax(probs, bits_a, Granularity::per_tensor);
  }
  blk.softmax_q = std::move(sq);
}

BlockReport reconstruct_block(TransformerBlock& blk, std::size_t index, CalibrationSet& calib, const ReconConfig& cfg) {
  check_pair(calib.inputs, calib.targets);
  BlockReport rep;
  rep.index = index;

  std::vector<Tensor> adapter_params;
  for (LinearLayer* l : blk.linears()) {
    if (l->search) throw StateError(l->name + ": rank search still attached; select a rank before reconstruction");
    if (l->adapter)
      for (const Tensor& t : l->adapter->parameters()) adapter_params.push_back(t);
  }
  const bool learn_interval = blk.softmax_q && blk.softmax_q->kind == SoftmaxQuantKind::dfq;
  std::vector<Tensor> interval_params;
  if (learn_interval) interval_params = {blk.softmax_q->interval.b1, blk.softmax_q->interval.b2};

  Adam::Options ao;
  ao.lr = cfg.adapter_lr;
  Adam adapters(adapter_params, ao);
  Adam::Options io;
  io.lr = cfg.interval_lr;
  Adam interval(interval_params, io);

  const CurriculumSchedule sched{cfg.lambda0, std::max<std::size_t>(cfg.calib_iters, 1)};
  const std::vector<std::size_t> everything = iota_indices(calib.size());
  Rng batch_rng = Rng::stream(cfg.seed, "batch/recon/block" + std::to_string(index));

  rep.initial_loss = mean_of(per_sample_losses(calib.inputs, calib.targets, blk));
  const bool trainable = !adapter_params.empty() || learn_interval;
  for (std::size_t t = 0; trainable && t < cfg.calib_iters; ++t) {
    const std::vector<std::size_t> pool =
        cfg.use_curriculum ? curriculum_subset(calib, t, sched, cfg.hardness_refresh_every, blk) : everything;
    const std::vector<std::size_t> rows = batch_rng.sample(pool, cfg.batch_size);
    Tensor loss = block_recon_loss(gather_rows(calib.inputs, rows), gather_rows(calib.targets, rows), blk);
    const double value = loss.item();
    if (!std::isfinite(value)) {
      throw StateError("reconstruction diverged at block " + std::to_string(index) + ", iteration " + std::to_string(t));
    }
    adapters.zero_grad();
    interval.zero_grad();
    loss.backward();
    adapters.step();
    interval.step();
    if (learn_interval) blk.softmax_q->interval.project();
    if (cfg.record_every > 0 && t % cfg.record_every == 0) {
      rep.trajectory_iters.push_back(t);
      rep.trajectory.push_back(value);
      rep.subset_sizes.push_back(pool.size());
    }
  }
  adapters.zero_grad();
  interval.zero_grad();
  rep.final_loss = mean_of(per_sample_losses(calib.inputs, calib.targets, blk));
  if (learn_interval) rep.interval = std::make_pair(blk.softmax_q->interval.lower(), blk.softmax_q->interval.upper());
  return rep;
}

QuantizedModel quantize_model(const ModelGraph& fp, const Tensor& calib_images, const ReconConfig& cfg) {
  cfg.validate();
  QuantizedModel qm{frozen_copy(fp), QuantizationReport{cfg, {}}};
  ModelGraph& q = qm.graph;

  lowrank::SearchConfig scfg;
  scfg.candidates = cfg.rank_set;
  scfg.iters = cfg.search_iters;
  scfg.batch_size = cfg.batch_size;
  scfg.weight_lr = cfg.adapter_lr;
  scfg.arch_lr = cfg.arch_lr;
  scfg.drop_path_rate = cfg.drop_path_rate;
  scfg.seed = cfg.seed;
  scfg.record_every = cfg.record_every;

  for (std::size_t l = 0; l < q.blocks.size(); ++l) {
    const std::string tag = "block " + std::to_string(l) + ": ";
    TransformerBlock& blk = q.blocks[l];
    log_line(cfg, tag + "capture");
    BlockIO io = capture_block_io(fp, q, calib_images, l);

    log_line(cfg, tag + "calibrate");
    calibrate_block_quantizers(blk, io.inputs, cfg.bits_w, cfg.bits_a, cfg.use_dfq);
    const double baseline = mean_of(per_sample_losses(io.inputs, io.targets, blk));

    std::vector<lowrank::LayerSearchReport> search;
    if (cfg.use_lowrank) {
      if (cfg.fixed_rank) {
        lowrank::install_fixed_rank(blk, l, *cfg.fixed_rank, cfg.seed);
      } else {
        log_line(cfg, tag + "rank search");
        search = lowrank::search_block_ranks(blk, l, io.inputs, io.targets, scfg);
      }
    }

    log_line(cfg, tag + "reconstruct");
    CalibrationSet calib{io.inputs, io.targets, {}, std::nullopt};
    BlockReport rep = reconstruct_block(blk, l, calib, cfg);
    rep.baseline_loss = baseline;
    rep.search = std::move(search);
    for (const LinearLayer* layer : blk.linears()) {
      rep.ranks[layer->name] = layer->adapter ? layer->adapter->rank() : 0;
    }

    log_line(cfg, tag + "reparameterize");
    for (auto [ln, succ] : {std::pair{&blk.ln1, &blk.qkv}, std::pair{&blk.ln2, &blk.fc1}}) {
      if (succ->input_qp && succ->input_qp->granularity == quant::Granularity::per_channel) {
        reparam::ReparamPlan plan = reparam::build_plan(*succ->input_qp);
        reparam::apply_plan(plan, *ln, *succ);
        rep.plans.emplace_back(succ->name, std::move(plan));
      }
    }
    rep.reparam_loss = mean_of(per_sample_losses(io.inputs, io.targets, blk));
    log_line(cfg, tag + "done");
    qm.report.blocks.push_back(std::move(rep));
  }
  calibrate_head(q, calib_images, cfg.bits_w, cfg.bits_a);
  return qm;
}

ModelGraph minmax_ptq(const ModelGraph& fp, const Tensor& calib_images, int bits_w, int bits_a) {
  ModelGraph q = frozen_copy(fp);
  for (std::size_t l = 0; l < q.blocks.size(); ++l) {
    const BlockIO io = capture_block_io(fp, q, calib_images, l);
    calibrate_block_quantizers(q.blocks[l], io.inputs, bits_w, bits_a, false, false);
  }
  calibrate_head(q, calib_images, bits_w, bits_a);
  return q;
}

}  // namespace vitptq::recon
