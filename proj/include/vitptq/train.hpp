// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "vitptq/data.hpp"
#include "vitptq/model.hpp"

namespace vitptq {

struct TrainOptions {
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double lr = 2e-3;
  std::uint64_t seed = 42;
  std::function<void(const std::string&)> log;
};

/// Full-precision training with Adam on cross-entropy; returns the mean
/// loss of every epoch.
std::vector<double> train_classifier(ModelGraph& g, const Dataset& train, const TrainOptions& opts);

Tensor predict_logits(const ModelGraph& g, const Tensor& images, Mode mode, std::size_t chunk = 128);

struct Accuracy {
  double top1 = 0.0;
  double top5 = 0.0;
  std::size_t samples = 0;
};

/// Top-k counts a hit when the label is among the k largest logits; equal
/// logits rank by class index.
Accuracy accuracy(const Tensor& logits, const std::vector<std::size_t>& labels);
Accuracy evaluate(const ModelGraph& g, const Dataset& data, Mode mode);

/// Mean per-sample reconstruction loss of every block of `quantized`, each
/// fed by its own quantized prefix and compared with the full-precision
/// model's block output.
std::vector<double> block_losses(const ModelGraph& fp, const ModelGraph& quantized, const Tensor& images);

/// Softmax regression on raw pixels (separability baseline).
double linear_probe_accuracy(const Dataset& train, const Dataset& test, std::size_t epochs = 30, std::uint64_t seed = 42);

}  // namespace vitptq
