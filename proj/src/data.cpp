// SPDX-License-Identifier: Apache-2.0
#include "vitptq/data.hpp"

#include <cmath>
#include <string>

#include "vitptq/errors.hpp"
#include "vitptq/model.hpp"
#include "vitptq/rng.hpp"

namespace vitptq {

namespace {

struct Blob {
  double cy = 0.0;
  double cx = 0.0;
  double sigma = 1.0;
  std::vector<double> amplitude;  // per channel
};

}  // namespace

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
  Dataset d;
  d.images = gather_rows(images, rows);
  d.num_classes = num_classes;
  for (std::size_t r : rows) d.labels.push_back(labels.at(r));
  return d;
}

Dataset Dataset::head(std::size_t n) const {
  if (n == 0 || n > size()) throw ContractError("dataset head of " + std::to_string(n) + " out of " + std::to_string(size()));
  std::vector<std::size_t> rows(n);
  for (std::size_t i = 0; i < n; ++i) rows[i] = i;
  return subset(rows);
}

Dataset synth_dataset(const SynthConfig& cfg, std::size_t n_samples, std::string_view split) {
  if (cfg.num_classes < 2) throw ContractError("synthetic dataset needs at least two classes");
  if (cfg.image_size == 0 || cfg.channels == 0 || cfg.blobs_per_class == 0) {
    throw ContractError("synthetic dataset dimensions must be positive");
  }
  if (n_samples == 0) throw ContractError("synthetic dataset needs at least one sample");

  const double s = static_cast<double>(cfg.image_size);
  Rng proto_rng = Rng::stream(cfg.seed, "synth/prototypes");
  std::vector<std::vector<Blob>> classes(cfg.num_classes);
  for (auto& blobs : classes) {
    for (std::size_t b = 0; b < cfg.blobs_per_class; ++b) {
      Blob blob;
      blob.cy = proto_rng.uniform(0.15 * s, 0.85 * s);
      blob.cx = proto_rng.uniform(0.15 * s, 0.85 * s);
      blob.sigma = proto_rng.uniform(0.08 * s, 0.16 * s);
      for (std::size_t c = 0; c < cfg.channels; ++c) {
        const double mag = proto_rng.uniform(0.8, 1.6);
        blob.amplitude.push_back(proto_rng.bernoulli(0.5) ? mag : -mag);
      }
      blobs.push_back(std::move(blob));
    }
  }

  Rng rng = Rng::stream(cfg.seed, "synth/" + std::string(split));
  std::vector<std::size_t> labels(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) labels[i] = i % cfg.num_classes;
  const std::vector<std::size_t> perm = rng.permutation(n_samples);
  std::vector<std::size_t> shuffled(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) shuffled[i] = labels[perm[i]];

  const std::size_t hw = cfg.image_size * cfg.image_size;
  std::vector<double> pixels(n_samples * cfg.channels * hw, 0.0);
  for (std::size_t i = 0; i < n_samples; ++i) {
    double* img = pixels.data() + i * cfg.channels * hw;
    for (const Blob& proto : classes[shuffled[i]]) {
      const double cy = proto.cy + rng.normal(0.0, cfg.center_jitter);
      const double cx = proto.cx + rng.normal(0.0, cfg.center_jitter);
      const double gain = 1.0 + rng.normal(0.0, cfg.amplitude_jitter);
      const double inv = 1.0 / (2.0 * proto.sigma * proto.sigma);
      for (std::size_t y = 0; y < cfg.image_size; ++y)
        for (std::size_t x = 0; x < cfg.image_size; ++x) {
          const double dy = static_cast<double>(y) + 0.5 - cy;
          const double dx = static_cast<double>(x) + 0.5 - cx;
          const double g = gain * std::exp(-(dy * dy + dx * dx) * inv);
          for (std::size_t c = 0; c < cfg.channels; ++c) img[c * hw + y * cfg.image_size + x] += g * proto.amplitude[c];
        }
    }
    for (std::size_t k = 0; k < cfg.channels * hw; ++k) img[k] += rng.normal(0.0, cfg.noise);
  }

  Dataset d;
  d.images = Tensor({n_samples, cfg.channels, cfg.image_size, cfg.image_size}, std::move(pixels));
  d.labels = std::move(shuffled);
  d.num_classes = cfg.num_classes;
  return d;
}

}  // namespace vitptq
