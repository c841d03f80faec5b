// SPDX-License-Identifier: Apache-2.0
//
// Run configuration files and quantization report emission.
#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "vitptq/recon.hpp"

namespace vitptq::io {

/// Everything `quantize` needs. Config files are JSON objects with the keys
/// of to_json(); absent keys keep their defaults, unknown keys are errors.
struct RunConfig {
  recon::ReconConfig recon;
  std::string model_path;
  std::string calib_path;

  nlohmann::json to_json() const;
  /// Applies the keys of `j` on top of `base`. Throws FormatError on
  /// unknown keys, wrong types or values outside the accepted ranges.
  static RunConfig from_json(const nlohmann::json& j, const RunConfig& base = {});
  static RunConfig load(const std::filesystem::path& path);
  void validate() const;
};

nlohmann::json report_to_json(const recon::QuantizationReport& r);

/// CSV tables (file name -> contents, each with a header row):
///   blocks.csv     block, baseline_loss, initial_loss, final_loss, reparam_loss
///   losses.csv     block, iter, loss, subset_size
///   alpha.csv      block, layer, iter, rank, alpha
///   intervals.csv  block, b1, b2
///   ranks.csv      block, layer, in_features, out_features, rank, adapter_params
std::map<std::string, std::string> report_csv(const nlohmann::json& report);

}  // namespace vitptq::io
