// SPDX-License-Identifier: Apache-2.0
//
// Low-rank compensation of quantized linear layers and differentiable search
// of the adapter rank per layer.
#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "vitptq/adapter.hpp"
#include "vitptq/model.hpp"
#include "vitptq/optim.hpp"

namespace vitptq::lowrank {

/// Q(x) * Q(W + down*up) + b. The layer needs an adapter and calibrated
/// quantizers (StateError otherwise); a layer whose quantizers are absent is
/// treated as unquantized only when called with `require_calibration` false.
Tensor adapter_forward(const Tensor& x, const LinearLayer& layer, bool require_calibration = true);

/// Q(x) * Q(W) + sum_j drop_path(softmax(alpha)_j * Q(x) * down_j * up_j) + b.
Tensor mixed_forward(const Tensor& x, const LinearLayer& layer, const RankSearchState& st);

/// Candidates with r >= min(in, out) are removed; each removal appends a
/// message to `warnings` when given.
std::vector<std::size_t> feasible_candidates(const std::vector<std::size_t>& candidates, std::size_t in, std::size_t out,
                                             std::vector<std::string>* warnings = nullptr);

/// argmax over alpha; ties go to the smaller rank.
std::size_t select_rank(const RankSearchState& st);

/// Training/validation batch of block-level activations.
struct BlockBatch {
  Tensor inputs;
  Tensor targets;
};

/// Separate optimizers for adapter weights (inner problem) and architecture
/// logits (outer problem).
struct BilevelOptimizer {
  Adam weights;
  Adam arch;
  std::vector<Tensor> all;  // every learnable tensor in the block, for zeroing

  static BilevelOptimizer for_block(const TransformerBlock& blk, double weight_lr, double arch_lr);
};

struct BilevelLosses {
  double train = 0.0;
  double val = 0.0;
};

/// One alternating first-order update: adapters descend the reconstruction
/// loss on `train`, then the logits descend it on `val` with the adapters
/// held fixed.
BilevelLosses bilevel_step(TransformerBlock& blk, const BlockBatch& train, const BlockBatch& val, BilevelOptimizer& opt);

struct SearchConfig {
  std::vector<std::size_t> candidates{10, 20, 50, 100, 150};
  std::size_t iters = 2000;
  std::size_t batch_size = 32;
  double weight_lr = 1e-3;
  double arch_lr = 3e-3;
  double drop_path_rate = 0.1;
  std::uint64_t seed = 42;
  std::size_t record_every = 50;
};

struct LayerSearchReport {
  std::string layer;
  std::size_t in_features = 0;
  std::size_t out_features = 0;
  std::vector<std::size_t> candidates;
  std::vector<std::size_t> trajectory_iters;
  std::vector<std::vector<double>> alpha_trajectory;
  std::vector<double> final_alpha;
  std::size_t chosen_rank = 0;
  std::size_t search_overhead = 0;  // sum over candidates of r * (in + out)
  std::vector<std::string> warnings;
};

/// Attaches a search state to every linear layer of `blk`.
void attach_search(TransformerBlock& blk, const SearchConfig& cfg, std::size_t block_index);

/// Runs the bilevel search on a seeded 50/50 split of the block caches,
/// selects ranks and replaces each search state by a freshly initialized
/// adapter of the chosen rank (down Gaussian with stddev 1e-3, up = 0). Layers whose
/// candidate set is empty after filtering get no adapter.
std::vector<LayerSearchReport> search_block_ranks(TransformerBlock& blk, std::size_t block_index, const Tensor& inputs,
                                                  const Tensor& targets, const SearchConfig& cfg);

/// Installs fixed-rank adapters (no search); rank is clipped to the layer.
void install_fixed_rank(TransformerBlock& blk, std::size_t block_index, std::size_t rank, std::uint64_t seed);

}  // namespace vitptq::lowrank
