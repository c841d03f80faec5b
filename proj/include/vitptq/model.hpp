// SPDX-License-Identifier: Apache-2.0
//
// Block-structured vision transformer with attachable quantizers and
// low-rank adapters. Activations flow as [B, T, D] (T tokens of width D);
// rank-2 [T, D] inputs are accepted by the block functions as a batch of one.
#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "vitptq/adapter.hpp"
#include "vitptq/ops.hpp"
#include "vitptq/quant.hpp"
#include "vitptq/tensor.hpp"

namespace vitptq {

enum class Mode { fp, quant };

/// Called with (site, value) at quantization sites: "<layer>.in" for every
/// linear-layer input and "softmax" for attention probabilities (pre-quantizer).
using Observer = std::function<void(std::string_view site, const Tensor& value)>;

struct LinearLayer {
  std::string name;
  Tensor weight;  // [in, out], frozen during quantization
  std::optional<Tensor> bias;
  std::optional<lowrank::LowRankAdapter> adapter;
  std::optional<lowrank::RankSearchState> search;
  std::optional<quant::QuantParams> weight_qp;  // per output channel (axis 1)
  std::optional<quant::QuantParams> input_qp;

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
  /// weight + adapter correction (no quantization).
  Tensor effective_weight() const;

  /// fp:    x * (W + down*up) + b
  /// quant: Q(x) * Q(W + down*up) + b, or, while a rank search is attached,
  ///        Q(x) * Q(W) + mixed_correction(Q(x)) + b.
  Tensor forward(const Tensor& x, Mode mode) const;
};

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;
};

enum class SoftmaxQuantKind { dfq, uniform, log2 };

/// Quantizer on the attention probabilities. `fixed` holds the parameters of
/// the uniform and log2 kinds; `interval` belongs to the dfq kind.
struct SoftmaxQuantizer {
  SoftmaxQuantKind kind = SoftmaxQuantKind::dfq;
  int bits = 4;
  quant::FocusInterval interval;
  quant::QuantParams fixed;

  Tensor apply(const Tensor& probs) const;
};

struct TransformerBlock {
  std::size_t heads = 1;
  std::size_t head_dim = 1;
  double ln_eps = 1e-6;
  ops::GeluKind gelu = ops::GeluKind::tanh;
  LayerNormParams ln1;
  LinearLayer qkv;  // D -> 3D laid out as [Q | K | V], head h at columns [h*Dh, (h+1)*Dh)
  LinearLayer proj;
  LayerNormParams ln2;
  LinearLayer fc1;
  LinearLayer fc2;
  std::optional<SoftmaxQuantizer> softmax_q;

  std::size_t dim() const { return heads * head_dim; }
  std::vector<LinearLayer*> linears() { return {&qkv, &proj, &fc1, &fc2}; }
  std::vector<const LinearLayer*> linears() const { return {&qkv, &proj, &fc1, &fc2}; }
};

/// Multi-head self-attention on an already normalized input.
Tensor mhsa_forward(const Tensor& x, const TransformerBlock& blk, Mode mode, const Observer* observer = nullptr);
/// Pre-norm residual block: x + MHSA(LN1(x)), then + MLP(LN2(.)).
Tensor block_forward(const Tensor& x, const TransformerBlock& blk, Mode mode, const Observer* observer = nullptr);

enum class Pooling { mean, cls };

struct ModelConfig {
  std::size_t image_size = 16;
  std::size_t patch_size = 4;
  std::size_t channels = 1;
  std::size_t num_classes = 10;
  std::size_t dim = 32;
  std::size_t depth = 2;
  std::size_t heads = 2;
  std::size_t mlp_dim = 128;
  Pooling pooling = Pooling::mean;
  ops::GeluKind gelu = ops::GeluKind::tanh;
  double ln_eps = 1e-6;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }
  std::size_t tokens() const { return num_patches() + (pooling == Pooling::cls ? 1 : 0); }
  /// Throws ContractError on inconsistent values.
  void validate() const;

  /// D=32, N=16, H=2, 2 blocks.
  static ModelConfig unit_toy();
  /// D=64, N=64, H=4, 4 blocks.
  static ModelConfig integration_toy();
};

struct ModelGraph {
  ModelConfig config;
  LinearLayer embed;  // patch_dim -> D
  Tensor pos_embed;   // [tokens, D]
  std::optional<Tensor> cls_token;  // [1, D]
  std::vector<TransformerBlock> blocks;
  LayerNormParams norm;
  LinearLayer head;  // D -> classes

  static ModelGraph init(const ModelConfig& config, Rng& rng);

  /// Every tensor with a stable name (parameters and adapter factors).
  std::vector<std::pair<std::string, Tensor>> named_tensors() const;
  /// Trainable full-precision parameters.
  std::vector<Tensor> parameters() const;
  /// Deep copy (no shared tensor storage).
  ModelGraph clone() const;
  std::vector<const LinearLayer*> all_linears() const;
};

/// [B, C, H, W] images -> [B, N, C*p*p] patches, row-major over the patch
/// grid; each patch vector is ordered (channel, row, column).
Tensor patchify(const Tensor& images, const ModelConfig& config);
/// Patch embedding (+ cls token) + positional embedding -> [B, T, D].
Tensor embed_forward(const Tensor& images, const ModelGraph& g, Mode mode);
/// Final norm, pooling and classifier on block outputs -> [B, classes].
Tensor head_forward(const Tensor& x, const ModelGraph& g, Mode mode);
Tensor model_forward(const Tensor& images, const ModelGraph& g, Mode mode);

/// Cached activations for reconstructing block `index`.
struct BlockIO {
  Tensor inputs;     // [n, T, D] produced by the quantized prefix
  Tensor fp_inputs;  // [n, T, D] produced by the full-precision prefix
  Tensor targets;    // [n, T, D] full-precision block output on fp_inputs
};

/// Blocks before `index` of `quantized` must already be quantized.
BlockIO capture_block_io(const ModelGraph& fp, const ModelGraph& quantized, const Tensor& images, std::size_t index,
                         std::size_t chunk = 64);

/// Rows of a leading-axis tensor, copied (no gradient history).
Tensor gather_rows(const Tensor& t, std::span<const std::size_t> rows);

}  // namespace vitptq
