// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "vitptq/tensor.hpp"

namespace vitptq {

/// Images [n, C, H, W] with integer labels.
struct Dataset {
  Tensor images;
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  /// Copies the given samples.
  Dataset subset(std::span<const std::size_t> rows) const;
  /// First n samples.
  Dataset head(std::size_t n) const;
};

/// Class-conditional Gaussian-blob images. Every class owns a few blobs
/// (centre, width, signed amplitude) drawn once from `seed`; a sample
/// jitters those blobs and adds pixel noise. Splits with different names
/// share the classes but draw independent samples. Labels are balanced
/// (each class appears floor or ceil of n / num_classes times) and shuffled.
struct SynthConfig {
  std::uint64_t seed = 42;
  std::size_t num_classes = 10;
  std::size_t image_size = 16;
  std::size_t channels = 1;
  std::size_t blobs_per_class = 3;
  double center_jitter = 1.0;     // pixels
  double amplitude_jitter = 0.15;  // relative
  double noise = 0.4;
};

Dataset synth_dataset(const SynthConfig& cfg, std::size_t n_samples, std::string_view split);

}  // namespace vitptq
