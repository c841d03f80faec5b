// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gradcheck_suite.hpp"
#include "vitptq/errors.hpp"
#include "vitptq/recon.hpp"

using namespace vitptq;
using namespace vitptq::recon;

namespace {

/// Minimum summed hardness over every subset of exactly k elements, by
/// enumeration.
double brute_force_min_sum(const std::vector<double>& h, std::size_t k) {
  const std::size_t n = h.size();
  double best = HUGE_VAL;
  for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
    if (static_cast<std::size_t>(__builtin_popcount(mask)) != k) continue;
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      if (mask & (1u << i)) s += h[i];
    best = std::min(best, s);
  }
  return best;
}

struct BlockFixture {
  TransformerBlock blk;
  Tensor inputs;
  Tensor targets;
};

BlockFixture block_fixture(std::uint64_t seed, std::size_t n = 12) {
  Rng rng(seed);
  ModelGraph g = ModelGraph::init(testkit::tiny_block_config(), rng);
  BlockFixture f{g.blocks[0], Tensor::randn({n, 4, 8}, rng), {}};
  f.targets = block_forward(f.inputs, f.blk, Mode::fp);
  calibrate_block_quantizers(f.blk, f.inputs, 3, 3, true);
  return f;
}

ReconConfig small_config() {
  ReconConfig cfg;
  cfg.rank_set = {2, 4};
  cfg.search_iters = 3;
  cfg.calib_iters = 5;
  cfg.batch_size = 4;
  cfg.record_every = 2;
  cfg.hardness_refresh_every = 2;
  cfg.seed = 9;
  return cfg;
}

struct PipelineFixture {
  ModelGraph fp;
  Tensor calib;
};

PipelineFixture pipeline_fixture() {
  Rng rng(40);
  PipelineFixture f{ModelGraph::init(ModelConfig::unit_toy(), rng), Tensor::randn({12, 1, 16, 16}, rng)};
  return f;
}

}  // namespace

TEST(LambdaSchedule, LinearPacing) {
  const CurriculumSchedule s{0.5, 6000};
  EXPECT_EQ(lambda_schedule(0, s), 0.5);
  EXPECT_EQ(lambda_schedule(3000, s), 0.75);
  EXPECT_EQ(lambda_schedule(6000, s), 1.0);
  EXPECT_EQ(lambda_schedule(9000, s), 1.0);
  for (std::size_t t = 1; t <= 6000; ++t) EXPECT_GE(lambda_schedule(t, s), lambda_schedule(t - 1, s));
  EXPECT_THROW(lambda_schedule(0, CurriculumSchedule{0.0, 10}), ContractError);
  EXPECT_THROW(lambda_schedule(0, CurriculumSchedule{0.5, 0}), ContractError);
}

TEST(SubsetSize, CeilingWithBounds) {
  EXPECT_EQ(subset_size(0.5, 10), 5u);
  EXPECT_EQ(subset_size(0.55, 10), 6u);
  EXPECT_EQ(subset_size(0.7, 10), 7u);
  EXPECT_EQ(subset_size(1e-6, 10), 1u);
  EXPECT_EQ(subset_size(1.0, 10), 10u);
  EXPECT_THROW(subset_size(0.0, 10), ContractError);
  EXPECT_THROW(subset_size(1.5, 10), ContractError);
}

TEST(SelectSubset, HandExample) {
  const std::vector<double> h{0.9, 0.1, 0.5, 0.3};
  EXPECT_EQ(select_subset(h, 0.5), (std::vector<std::size_t>{1, 3}));
  EXPECT_EQ(select_subset(h, 1.0), (std::vector<std::size_t>{1, 3, 2, 0}));
}

TEST(SelectSubset, TiesGoToLowerIndex) {
  const std::vector<double> h{1.0, 0.5, 0.5, 0.5, 2.0};
  EXPECT_EQ(select_subset(h, 0.4), (std::vector<std::size_t>{1, 2}));
}

TEST(SelectSubset, MatchesBruteForce) {
  Rng rng(1);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 1 + rng.index(10);
    std::vector<double> h(n);
    // Integer-valued hardness makes ties common.
    for (double& v : h) v = trial % 2 ? rng.uniform(0.0, 5.0) : static_cast<double>(rng.index(4));
    const double lambda = rng.uniform(0.01, 1.0);
    const auto sel = select_subset(h, lambda);
    ASSERT_EQ(sel.size(), subset_size(lambda, n));
    double s = 0.0;
    for (std::size_t i : sel) s += h[i];
    EXPECT_NEAR(s, brute_force_min_sum(h, sel.size()), 1e-12);
    for (std::size_t k = 1; k < sel.size(); ++k) EXPECT_LE(h[sel[k - 1]], h[sel[k]]);
  }
}

TEST(SelectSubset, GrowsMonotonically) {
  Rng rng(2);
  std::vector<double> h(50);
  for (double& v : h) v = rng.uniform();
  std::vector<std::size_t> prev;
  for (double lambda = 0.02; lambda <= 1.0; lambda += 0.02) {
    const auto sel = select_subset(h, lambda);
    ASSERT_GE(sel.size(), prev.size());
    EXPECT_TRUE(std::equal(prev.begin(), prev.end(), sel.begin()));
    prev = sel;
  }
}

TEST(CurriculumSubset, RefreshesOnlyWhenStale) {
  BlockFixture f = block_fixture(3);
  CalibrationSet calib{f.inputs, f.targets, {}, std::nullopt};
  const CurriculumSchedule sched{0.5, 10};
  curriculum_subset(calib, 0, sched, 4, f.blk);
  ASSERT_EQ(calib.hardness.size(), 12u);
  EXPECT_EQ(calib.hardness_age, std::optional<std::size_t>(0));
  const auto first = calib.hardness;

  // Perturb the block; the cache must not notice until the refresh point.
  auto bias = f.blk.fc2.bias->mutable_data();
  for (double& b : bias) b += 0.5;
  curriculum_subset(calib, 3, sched, 4, f.blk);
  EXPECT_EQ(calib.hardness, first);
  const auto sel = curriculum_subset(calib, 4, sched, 4, f.blk);
  EXPECT_NE(calib.hardness, first);
  EXPECT_EQ(calib.hardness_age, std::optional<std::size_t>(4));
  EXPECT_EQ(sel, select_subset(calib.hardness, lambda_schedule(4, sched)));
}

TEST(BlockReconLoss, MatchesDirectFrobeniusMean) {
  const BlockFixture f = block_fixture(4);
  const Tensor y = block_forward(f.inputs, f.blk, Mode::quant);
  const std::size_t per = 4 * 8;
  double total = 0.0;
  std::vector<double> norms;
  for (std::size_t s = 0; s < 12; ++s) {
    double acc = 0.0;
    for (std::size_t k = 0; k < per; ++k) {
      const double d = y[s * per + k] - f.targets[s * per + k];
      acc += d * d;
    }
    norms.push_back(std::sqrt(acc));
    total += norms.back();
  }
  EXPECT_NEAR(block_recon_loss(f.inputs, f.targets, f.blk).item(), total / 12.0, 1e-10);
  const auto ps = per_sample_losses(f.inputs, f.targets, f.blk, 5);
  ASSERT_EQ(ps.size(), 12u);
  for (std::size_t s = 0; s < 12; ++s) EXPECT_NEAR(ps[s], norms[s], 1e-10);
  EXPECT_THROW(block_recon_loss(f.inputs, gather_rows(f.targets, std::vector<std::size_t>{0}), f.blk), DimensionError);
}

TEST(BlockReconLoss, ZeroWhenQuantizersAreAbsent) {
  BlockFixture f = block_fixture(5);
  for (LinearLayer* l : f.blk.linears()) {
    l->weight_qp.reset();
    l->input_qp.reset();
  }
  f.blk.softmax_q.reset();
  EXPECT_EQ(block_recon_loss(f.inputs, f.targets, f.blk).item(), 0.0);
}

TEST(CalibrateBlock, PostNormInputsArePerChannel) {
  const BlockFixture f = block_fixture(6);
  EXPECT_EQ(f.blk.qkv.input_qp->granularity, quant::Granularity::per_channel);
  EXPECT_EQ(f.blk.fc1.input_qp->granularity, quant::Granularity::per_channel);
  EXPECT_EQ(f.blk.proj.input_qp->granularity, quant::Granularity::per_tensor);
  EXPECT_EQ(f.blk.fc2.input_qp->granularity, quant::Granularity::per_tensor);
  for (const LinearLayer* l : f.blk.linears()) {
    EXPECT_EQ(l->weight_qp->granularity, quant::Granularity::per_channel);
    EXPECT_EQ(l->weight_qp->scale.size(), l->out_features());
  }
  ASSERT_TRUE(f.blk.softmax_q.has_value());
  EXPECT_EQ(f.blk.softmax_q->kind, SoftmaxQuantKind::dfq);
  EXPECT_EQ(f.blk.softmax_q->interval.lower(), 0.0);
}

TEST(ReconstructBlock, ZeroLearningRatesKeepTheLoss) {
  BlockFixture f = block_fixture(7);
  lowrank::install_fixed_rank(f.blk, 0, 2, 1);
  CalibrationSet calib{f.inputs, f.targets, {}, std::nullopt};
  ReconConfig cfg = small_config();
  cfg.adapter_lr = 0.0;
  cfg.interval_lr = 0.0;
  const BlockReport r = reconstruct_block(f.blk, 0, calib, cfg);
  EXPECT_EQ(r.final_loss, r.initial_loss);
  EXPECT_EQ(r.trajectory_iters, (std::vector<std::size_t>{0, 2, 4}));
  EXPECT_EQ(r.subset_sizes.front(), 6u);
}

TEST(ReconstructBlock, LearnsAdaptersAndInterval) {
  BlockFixture f = block_fixture(8);
  lowrank::install_fixed_rank(f.blk, 0, 4, 1);
  CalibrationSet calib{f.inputs, f.targets, {}, std::nullopt};
  ReconConfig cfg = small_config();
  cfg.calib_iters = 60;
  cfg.adapter_lr = 1e-2;
  cfg.interval_lr = 1e-2;
  const double b2 = f.blk.softmax_q->interval.upper();
  const BlockReport r = reconstruct_block(f.blk, 0, calib, cfg);
  EXPECT_LT(r.final_loss, r.initial_loss);
  ASSERT_TRUE(r.interval.has_value());
  EXPECT_NE(r.interval->second, b2);
  EXPECT_GE(r.interval->first, 0.0);
  EXPECT_LE(r.interval->second, 1.0);
}

TEST(ReconstructBlock, RejectsAttachedSearch) {
  BlockFixture f = block_fixture(9);
  lowrank::SearchConfig sc;
  sc.candidates = {2};
  lowrank::attach_search(f.blk, sc, 0);
  CalibrationSet calib{f.inputs, f.targets, {}, std::nullopt};
  EXPECT_THROW(reconstruct_block(f.blk, 0, calib, small_config()), StateError);
}

TEST(ReconConfig, Validation) {
  ReconConfig c;
  EXPECT_NO_THROW(c.validate());
  c.bits_w = 1;
  EXPECT_THROW(c.validate(), ContractError);
  c = ReconConfig{};
  c.rank_set.clear();
  EXPECT_THROW(c.validate(), ContractError);
  c = ReconConfig{};
  c.fixed_rank = 0;
  EXPECT_THROW(c.validate(), ContractError);
  c = ReconConfig{};
  c.drop_path_rate = 1.0;
  EXPECT_THROW(c.validate(), ContractError);
}

TEST(QuantizeModel, BlocksRunInOrderAndReportRanks) {
  const PipelineFixture f = pipeline_fixture();
  ReconConfig cfg = small_config();
  std::vector<std::string> log;
  cfg.log = [&](const std::string& s) { log.push_back(s); };
  const QuantizedModel qm = quantize_model(f.fp, f.calib, cfg);

  const auto pos = [&](const std::string& s) { return std::find(log.begin(), log.end(), s) - log.begin(); };
  EXPECT_LT(pos("block 0: done"), pos("block 1: capture"));
  EXPECT_LT(pos("block 0: rank search"), pos("block 0: reconstruct"));
  EXPECT_LT(pos("block 0: reconstruct"), pos("block 0: reparameterize"));

  ASSERT_EQ(qm.report.blocks.size(), 2u);
  for (const auto& b : qm.report.blocks) {
    EXPECT_EQ(b.ranks.size(), 4u);
    EXPECT_EQ(b.search.size(), 4u);
    for (const auto& [name, r] : b.ranks) EXPECT_TRUE(r == 2 || r == 4) << name;
    EXPECT_EQ(b.plans.size(), 2u);
    EXPECT_TRUE(b.interval.has_value());
  }
  ASSERT_TRUE(qm.graph.head.weight_qp && qm.graph.head.input_qp);
}

TEST(QuantizeModel, PretrainedWeightsAreNeverTrained) {
  const PipelineFixture f = pipeline_fixture();
  const QuantizedModel qm = quantize_model(f.fp, f.calib, small_config());
  for (std::size_t l = 0; l < 2; ++l) {
    for (auto [a, b] : {std::pair{&qm.graph.blocks[l].proj, &f.fp.blocks[l].proj},
                        std::pair{&qm.graph.blocks[l].fc2, &f.fp.blocks[l].fc2}}) {
      EXPECT_TRUE(std::equal(a->weight.data().begin(), a->weight.data().end(), b->weight.data().begin()));
      EXPECT_FALSE(a->weight.requires_grad());
    }
  }
  EXPECT_TRUE(f.fp.blocks[0].proj.weight.requires_grad());
  EXPECT_FALSE(f.fp.blocks[0].proj.adapter.has_value());
}

TEST(QuantizeModel, SwitchesChangeThePipeline) {
  const PipelineFixture f = pipeline_fixture();
  ReconConfig cfg = small_config();
  cfg.use_lowrank = false;
  cfg.use_dfq = false;
  cfg.use_curriculum = false;
  const QuantizedModel plain = quantize_model(f.fp, f.calib, cfg);
  for (const auto& b : plain.report.blocks) {
    for (const auto& [name, r] : b.ranks) EXPECT_EQ(r, 0u) << name;
    EXPECT_TRUE(b.search.empty());
    EXPECT_FALSE(b.interval.has_value());
    for (std::size_t s : b.subset_sizes) EXPECT_EQ(s, 12u);
  }
  EXPECT_EQ(plain.graph.blocks[0].softmax_q->kind, SoftmaxQuantKind::uniform);

  cfg = small_config();
  cfg.fixed_rank = 3;
  const QuantizedModel fixed = quantize_model(f.fp, f.calib, cfg);
  for (const auto& b : fixed.report.blocks) {
    EXPECT_TRUE(b.search.empty());
    for (const auto& [name, r] : b.ranks) EXPECT_EQ(r, 3u) << name;
  }
}

TEST(QuantizeModel, Deterministic) {
  const PipelineFixture f = pipeline_fixture();
  const QuantizedModel a = quantize_model(f.fp, f.calib, small_config());
  const QuantizedModel b = quantize_model(f.fp, f.calib, small_config());
  const auto ta = a.graph.named_tensors(), tb = b.graph.named_tensors();
  ASSERT_EQ(ta.size(), tb.size());
  for (std::size_t i = 0; i < ta.size(); ++i) {
    EXPECT_EQ(ta[i].first, tb[i].first);
    EXPECT_TRUE(std::equal(ta[i].second.data().begin(), ta[i].second.data().end(), tb[i].second.data().begin()))
        << ta[i].first;
  }
}

TEST(MinmaxPtq, UniformSoftmaxAndLayerwiseActivations) {
  const PipelineFixture f = pipeline_fixture();
  const ModelGraph q = minmax_ptq(f.fp, f.calib, 4, 4);
  for (const auto& b : q.blocks) {
    EXPECT_EQ(b.softmax_q->kind, SoftmaxQuantKind::uniform);
    for (const LinearLayer* l : b.linears()) {
      EXPECT_EQ(l->input_qp->granularity, quant::Granularity::per_tensor);
      EXPECT_FALSE(l->adapter.has_value());
    }
  }
}
