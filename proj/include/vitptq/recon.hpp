// SPDX-License-Identifier: Apache-2.0
//
// Block-wise reconstruction with a curriculum over calibration samples, and
// the top-level quantization driver.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vitptq/lowrank.hpp"
#include "vitptq/model.hpp"
#include "vitptq/reparam.hpp"

namespace vitptq::recon {

/// Linear pacing: lambda(t) = min(1, lambda0 + (1 - lambda0) t / T).
struct CurriculumSchedule {
  double lambda0 = 0.5;
  std::size_t total_iters = 6000;
};

double lambda_schedule(std::size_t t, const CurriculumSchedule& sched);

/// ceil(lambda * n), at least 1 and at most n.
std::size_t subset_size(double lambda, std::size_t n);

/// Indices of the ceil(lambda * n) smallest hardness values; ties go to the
/// lower index. This is the exact minimizer of the summed loss over subsets
/// of at least that size. Returned in ascending hardness order.
std::vector<std::size_t> select_subset(std::span<const double> hardness, double lambda);

/// Block-level calibration caches plus the per-sample hardness cache.
struct CalibrationSet {
  Tensor inputs;   // [n, T, D]
  Tensor targets;  // [n, T, D]
  std::vector<double> hardness;
  std::optional<std::size_t> hardness_age;  // iteration of the last refresh

  std::size_t size() const { return inputs.dim(0); }
  bool stale(std::size_t t, std::size_t refresh_every) const {
    return !hardness_age || hardness.size() != size() || t - *hardness_age >= refresh_every;
  }
};

/// Mean over the batch of ||block_q(x) - target||_F (not squared),
/// differentiable with respect to everything learnable in the block.
Tensor block_recon_loss(const Tensor& inputs, const Tensor& targets, const TransformerBlock& blk);

/// Per-sample ||block_q(x) - target||_F without taping.
std::vector<double> per_sample_losses(const Tensor& inputs, const Tensor& targets, const TransformerBlock& blk,
                                      std::size_t chunk = 64);

/// Refreshes the hardness cache when stale, then applies select_subset.
std::vector<std::size_t> curriculum_subset(CalibrationSet& calib, std::size_t t, const CurriculumSchedule& sched,
                                           std::size_t refresh_every, const TransformerBlock& blk);

struct ReconConfig {
  int bits_w = 4;
  int bits_a = 4;
  std::vector<std::size_t> rank_set{10, 20, 50, 100, 150};
  std::size_t search_iters = 2000;
  std::size_t calib_iters = 6000;
  std::size_t batch_size = 32;
  double adapter_lr = 1e-3;
  double interval_lr = 1e-4;
  double arch_lr = 3e-3;
  std::size_t hardness_refresh_every = 250;
  std::uint64_t seed = 42;
  double lambda0 = 0.5;
  double drop_path_rate = 0.1;
  std::size_t record_every = 50;

  // Component switches (ablations).
  bool use_lowrank = true;
  bool use_dfq = true;
  bool use_curriculum = true;
  /// Skip the search and use this rank for every layer.
  std::optional<std::size_t> fixed_rank;

  std::function<void(const std::string&)> log;

  void validate() const;
};

struct BlockReport {
  std::size_t index = 0;
  double baseline_loss = 0.0;  // quantized, no compensation, initial quantizers
  double initial_loss = 0.0;   // start of reconstruction
  double final_loss = 0.0;     // end of reconstruction
  double reparam_loss = 0.0;   // after folding channel-wise activation scales
  std::vector<std::size_t> trajectory_iters;
  std::vector<double> trajectory;  // mini-batch loss at trajectory_iters
  std::vector<std::size_t> subset_sizes;  // curriculum subset size at trajectory_iters
  std::vector<lowrank::LayerSearchReport> search;
  std::map<std::string, std::size_t> ranks;  // layer -> chosen rank (0 = none)
  std::optional<std::pair<double, double>> interval;  // learned (b1, b2)
  std::vector<std::pair<std::string, reparam::ReparamPlan>> plans;
};

struct QuantizationReport {
  ReconConfig config;
  std::vector<BlockReport> blocks;
};

/// Attaches and calibrates every quantizer of a block from its cached inputs:
/// per-channel min-max weights; per-tensor activations except the inputs of
/// qkv and fc1 (LayerNorm outputs), which are per-channel; the softmax
/// quantizer is DFQ initialized to [0, max] or, with use_dfq false, a fixed
/// uniform min-max quantizer.
void calibrate_block_quantizers(TransformerBlock& blk, const Tensor& block_inputs, int bits_w, int bits_a,
                                bool use_dfq, bool channelwise_post_ln = true);

/// Reconstructs one block in place; search (if enabled) must already have run.
BlockReport reconstruct_block(TransformerBlock& blk, std::size_t index, CalibrationSet& calib, const ReconConfig& cfg);

struct QuantizedModel {
  ModelGraph graph;
  QuantizationReport report;
};

/// Per block: capture -> calibrate -> rank search -> reconstruct ->
/// reparameterize; then the classifier head is quantized.
QuantizedModel quantize_model(const ModelGraph& fp, const Tensor& calib_images, const ReconConfig& cfg);

/// Plain min-max post-training quantization: weights per channel, every
/// activation per tensor, uniform softmax quantizer, no reconstruction.
ModelGraph minmax_ptq(const ModelGraph& fp, const Tensor& calib_images, int bits_w, int bits_a);

}  // namespace vitptq::recon
