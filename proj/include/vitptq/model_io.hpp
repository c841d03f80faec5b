// SPDX-License-Identifier: Apache-2.0
//
// Models and datasets as containers.
//
// A model container's manifest holds "kind": "model", an "architecture"
// object (image_size, patch_size, channels, num_classes, dim, depth, heads,
// mlp_dim, pooling, gelu, ln_eps) and, for quantized models, a
// "quantization" object with per-layer quantizer parameters, adapter ranks
// and per-block softmax quantizers. Tensor names are those of
// ModelGraph::named_tensors(). A dataset container holds "kind": "dataset",
// "num_classes" and the tensors "images" [n, C, H, W] and "labels" [n].
#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "vitptq/container.hpp"
#include "vitptq/data.hpp"
#include "vitptq/model.hpp"

namespace vitptq::io {

nlohmann::json config_to_json(const ModelConfig& c);
/// Rejects missing or unknown keys and inconsistent values (FormatError).
ModelConfig config_from_json(const nlohmann::json& j);

nlohmann::json qparams_to_json(const quant::QuantParams& p);
quant::QuantParams qparams_from_json(const nlohmann::json& j);

/// True when any layer carries a quantizer.
bool is_quantized(const ModelGraph& g);

/// `extra` is merged into the manifest (it must not use the model keys).
Container model_to_container(const ModelGraph& g, const nlohmann::json& extra = nlohmann::json::object());
/// Every tensor is checked against the architecture; missing, unexpected or
/// misshapen tensors are FormatErrors.
ModelGraph model_from_container(const Container& c);

void save_model(const ModelGraph& g, const std::filesystem::path& path,
                const nlohmann::json& extra = nlohmann::json::object());
ModelGraph load_model(const std::filesystem::path& path);

/// The model exactly as a save/load cycle would return it (float32 weights).
ModelGraph round_trip(const ModelGraph& g);

Container dataset_to_container(const Dataset& d);
Dataset dataset_from_container(const Container& c);
void save_dataset(const Dataset& d, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

/// Reference logits recorded next to a model:
///   {"images": "<dataset container, relative to the sidecar>",
///    "logits": [[...], ...], "tolerance": 1e-4 (optional)}
/// The model is run in full precision on the images.
struct ReferenceCheck {
  std::size_t samples = 0;
  double max_abs_diff = 0.0;
  double tolerance = 1e-4;
  bool passed() const { return max_abs_diff <= tolerance; }
};

ReferenceCheck check_reference(const ModelGraph& g, const std::filesystem::path& sidecar);

}  // namespace vitptq::io
