// SPDX-License-Identifier: Apache-2.0
#include "vitptq/train.hpp"

#include <algorithm>
#include <numeric>

#include "vitptq/errors.hpp"
#include "vitptq/optim.hpp"
#include "vitptq/recon.hpp"

namespace vitptq {

namespace {

std::vector<std::size_t> slice_of(const std::vector<std::size_t>& v, std::size_t start, std::size_t len) {
  return {v.begin() + static_cast<std::ptrdiff_t>(start), v.begin() + static_cast<std::ptrdiff_t>(start + len)};
}

template <class LossFn>
std::vector<double> run_epochs(const Dataset& data, std::vector<Tensor> params, std::size_t epochs,
                               std::size_t batch_size, double lr, Rng& rng, LossFn&& loss_fn,
                               const std::function<void(const std::string&)>& log) {
  if (data.size() == 0) throw ContractError("training set is empty");
  if (batch_size == 0) throw ContractError("batch_size must be positive");
  Adam::Options o;
  o.lr = lr;
  Adam opt(std::move(params), o);
  std::vector<double> history;
  for (std::size_t e = 0; e < epochs; ++e) {
    const std::vector<std::size_t> order = rng.permutation(data.size());
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const auto rows = slice_of(order, start, std::min(batch_size, order.size() - start));
      std::vector<std::size_t> labels;
      for (std::size_t r : rows) labels.push_back(data.labels[r]);
      opt.zero_grad();
      Tensor loss = loss_fn(gather_rows(data.images, rows), labels);
      loss.backward();
      opt.step();
      total += loss.item();
      ++batches;
    }
    history.push_back(total / static_cast<double>(batches));
    if (log) log("epoch " + std::to_string(e + 1) + "/" + std::to_string(epochs) + " loss " + std::to_string(history.back()));
  }
  opt.zero_grad();
  return history;
}

}  // namespace

std::vector<double> train_classifier(ModelGraph& g, const Dataset& train, const TrainOptions& opts) {
  if (train.num_classes != g.config.num_classes) throw DimensionError("dataset classes do not match the model head");
  Rng rng = Rng::stream(opts.seed, "train/batches");
  return run_epochs(
      train, g.parameters(), opts.epochs, opts.batch_size, opts.lr, rng,
      [&](const Tensor& images, const std::vector<std::size_t>& labels) {
        return ops::cross_entropy(model_forward(images, g, Mode::fp), labels);
      },
      opts.log);
}

Tensor predict_logits(const ModelGraph& g, const Tensor& images, Mode mode, std::size_t chunk) {
  NoGradGuard guard;
  const std::size_t n = images.dim(0);
  std::vector<Tensor> parts;
  for (std::size_t start = 0; start < n; start += chunk) {
    std::vector<std::size_t> rows(std::min(chunk, n - start));
    std::iota(rows.begin(), rows.end(), start);
    parts.push_back(model_forward(gather_rows(images, rows), g, mode));
  }
  return parts.size() == 1 ? parts.front() : ops::concat(parts, 0);
}

Accuracy accuracy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw DimensionError("logits " + shape_str(logits.shape()) + " do not match " + std::to_string(labels.size()) +
                         " labels");
  }
  const std::size_t n = logits.dim(0);
  const std::size_t c = logits.dim(1);
  auto v = logits.data();
  std::size_t hit1 = 0;
  std::size_t hit5 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = v.data() + i * c;
    const double mine = row[labels[i]];
    // Rank of the label: classes strictly better, or equal with a lower index.
    std::size_t rank = 0;
    for (std::size_t j = 0; j < c; ++j) {
      if (row[j] > mine || (row[j] == mine && j < labels[i])) ++rank;
    }
    hit1 += rank < 1;
    hit5 += rank < 5;
  }
  const double denom = static_cast<double>(n);
  return {static_cast<double>(hit1) / denom, static_cast<double>(hit5) / denom, n};
}

Accuracy evaluate(const ModelGraph& g, const Dataset& data, Mode mode) {
  return accuracy(predict_logits(g, data.images, mode), data.labels);
}

std::vector<double> block_losses(const ModelGraph& fp, const ModelGraph& quantized, const Tensor& images) {
  std::vector<double> out;
  for (std::size_t l = 0; l < quantized.blocks.size(); ++l) {
    const BlockIO io = capture_block_io(fp, quantized, images, l);
    const auto v = recon::per_sample_losses(io.inputs, io.targets, quantized.blocks[l]);
    out.push_back(std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()));
  }
  return out;
}

double linear_probe_accuracy(const Dataset& train, const Dataset& test, std::size_t epochs, std::uint64_t seed) {
  const std::size_t features = train.images.numel() / train.size();
  Tensor w = Tensor::zeros({features, train.num_classes});
  Tensor b = Tensor::zeros({train.num_classes});
  w.set_requires_grad(true);
  b.set_requires_grad(true);
  auto logits_of = [&](const Tensor& images) {
    return ops::add(ops::matmul(ops::reshape(images, {images.dim(0), features}), w), b);
  };
  Rng rng = Rng::stream(seed, "probe/batches");
  run_epochs(
      train, {w, b}, epochs, 64, 1e-2, rng,
      [&](const Tensor& images, const std::vector<std::size_t>& labels) {
        return ops::cross_entropy(logits_of(images), labels);
      },
      nullptr);
  NoGradGuard guard;
  return accuracy(logits_of(test.images), test.labels).top1;
}

}  // namespace vitptq
