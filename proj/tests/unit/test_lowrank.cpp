// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck_suite.hpp"
#include "vitptq/errors.hpp"
#include "vitptq/lowrank.hpp"
#include "vitptq/optim.hpp"
#include "vitptq/recon.hpp"

using namespace vitptq;
using lowrank::RankSearchState;

namespace {

LinearLayer make_layer(std::size_t in, std::size_t out, Rng& rng) {
  LinearLayer l;
  l.name = "lin";
  l.weight = Tensor::randn({in, out}, rng, 0.5);
  l.bias = Tensor::randn({out}, rng, 0.1);
  return l;
}

void calibrate(LinearLayer& l, const Tensor& x, int bits) {
  l.weight_qp = quant::calibrate_minmax(l.weight, bits, quant::Granularity::per_channel, 1);
  l.input_qp = quant::calibrate_minmax(x, bits, quant::Granularity::per_tensor);
}

void fill_random(Tensor& t, Rng& rng, double stddev) {
  auto v = t.mutable_data();
  for (double& x : v) x = rng.normal() * stddev;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

RankSearchState search_state(std::size_t in, std::size_t out, std::vector<std::size_t> cands, std::uint64_t seed) {
  Rng init(seed);
  RankSearchState st = RankSearchState::init(in, out, cands, init, Rng(seed + 1), 0.0);
  Rng rng(seed + 2);
  for (auto& a : st.adapters) fill_random(a.up, rng, 0.3);
  st.training = false;
  return st;
}

std::vector<std::vector<double>> snapshot(const TransformerBlock& blk) {
  std::vector<std::vector<double>> out;
  auto add = [&](const Tensor& t) { out.emplace_back(t.data().begin(), t.data().end()); };
  add(blk.ln1.gamma);
  add(blk.ln1.beta);
  add(blk.ln2.gamma);
  add(blk.ln2.beta);
  for (const LinearLayer* l : blk.linears()) {
    add(l->weight);
    add(*l->bias);
    if (l->search) {
      add(l->search->alpha);
      for (const Tensor& t : l->search->adapter_parameters()) add(t);
    }
  }
  if (blk.softmax_q) {
    add(blk.softmax_q->interval.b1);
    add(blk.softmax_q->interval.b2);
  }
  return out;
}

struct SearchFixture {
  TransformerBlock blk;
  lowrank::BlockBatch train;
  lowrank::BlockBatch val;
};

SearchFixture search_fixture(std::vector<std::size_t> cands) {
  Rng rng(31);
  ModelGraph g = ModelGraph::init(testkit::tiny_block_config(), rng);
  SearchFixture f{g.blocks[0], {}, {}};
  const Tensor x = Tensor::randn({8, 4, 8}, rng);
  const Tensor y = block_forward(x, f.blk, Mode::fp);
  recon::calibrate_block_quantizers(f.blk, x, 3, 3, true);
  lowrank::SearchConfig cfg;
  cfg.candidates = std::move(cands);
  cfg.drop_path_rate = 0.0;
  lowrank::attach_search(f.blk, cfg, 0);
  f.train = {gather_rows(x, std::vector<std::size_t>{0, 1, 2, 3}), gather_rows(y, std::vector<std::size_t>{0, 1, 2, 3})};
  f.val = {gather_rows(x, std::vector<std::size_t>{4, 5, 6, 7}), gather_rows(y, std::vector<std::size_t>{4, 5, 6, 7})};
  return f;
}

}  // namespace

TEST(Adapter, InitStartsAtZeroCorrection) {
  Rng rng(1);
  const auto a = lowrank::LowRankAdapter::init(12, 8, 3, rng);
  EXPECT_EQ(a.down.shape(), (Shape{12, 3}));
  EXPECT_EQ(a.up.shape(), (Shape{3, 8}));
  const Tensor delta = a.delta();
  for (double v : delta.data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(a.parameter_count(), 3u * 20u);
}

TEST(AdapterForward, ZeroCorrectionEqualsQuantizedBase) {
  Rng rng(2);
  LinearLayer l = make_layer(12, 8, rng);
  const Tensor x = Tensor::randn({5, 12}, rng);
  calibrate(l, x, 4);
  const Tensor base = l.forward(x, Mode::quant);
  l.adapter = lowrank::LowRankAdapter::init(12, 8, 3, rng);
  EXPECT_EQ(max_abs_diff(lowrank::adapter_forward(x, l), base), 0.0);
  EXPECT_EQ(max_abs_diff(l.forward(x, Mode::quant), base), 0.0);
}

TEST(AdapterForward, UnquantizedIsBasePlusLowRankProduct) {
  Rng rng(3);
  LinearLayer l = make_layer(12, 8, rng);
  l.adapter = lowrank::LowRankAdapter::init(12, 8, 3, rng);
  fill_random(l.adapter->up, rng, 1.0);
  const Tensor x = Tensor::randn({5, 12}, rng);
  const Tensor want = ops::add(ops::add(ops::matmul(x, l.weight), ops::matmul(ops::matmul(x, l.adapter->down), l.adapter->up)),
                               *l.bias);
  EXPECT_LE(max_abs_diff(lowrank::adapter_forward(x, l, false), want), 1e-12);
}

TEST(AdapterForward, RequiresCalibrationAndAdapter) {
  Rng rng(4);
  LinearLayer l = make_layer(6, 4, rng);
  const Tensor x = Tensor::randn({2, 6}, rng);
  EXPECT_THROW(lowrank::adapter_forward(x, l), StateError);
  l.adapter = lowrank::LowRankAdapter::init(6, 4, 2, rng);
  EXPECT_THROW(lowrank::adapter_forward(x, l), StateError);
  EXPECT_THROW(l.forward(x, Mode::quant), StateError);
  calibrate(l, x, 4);
  EXPECT_THROW(lowrank::adapter_forward(Tensor::zeros({2, 5}), l), DimensionError);
}

TEST(MixedCorrection, EqualLogitsAverageThePaths) {
  const RankSearchState st = search_state(10, 7, {2, 3, 5}, 5);
  Rng rng(6);
  const Tensor x = Tensor::randn({4, 10}, rng);
  Tensor want = Tensor::zeros({4, 7});
  for (const auto& a : st.adapters) want = ops::add(want, ops::scale(ops::matmul(x, a.delta()), 1.0 / 3.0));
  EXPECT_LE(max_abs_diff(lowrank::mixed_correction(x, st), want), 1e-12);
}

TEST(MixedCorrection, DominantLogitSelectsOnePath) {
  RankSearchState st = search_state(10, 7, {2, 3, 5}, 7);
  st.alpha.mutable_data()[1] = 60.0;
  Rng rng(8);
  const Tensor x = Tensor::randn({4, 10}, rng);
  EXPECT_LE(max_abs_diff(lowrank::mixed_correction(x, st), ops::matmul(x, st.adapters[1].delta())), 1e-12);
}

TEST(MixedForward, UnquantizedDominantLogitMatchesAdapterForward) {
  Rng rng(9);
  LinearLayer l = make_layer(10, 7, rng);
  RankSearchState st = search_state(10, 7, {2, 3, 5}, 10);
  st.alpha.mutable_data()[2] = 60.0;
  l.adapter = st.adapters[2];
  const Tensor x = Tensor::randn({4, 10}, rng);
  EXPECT_LE(max_abs_diff(lowrank::mixed_forward(x, l, st), lowrank::adapter_forward(x, l, false)), 1e-12);
}

TEST(MixedForward, WeightsAreSoftmaxOfLogits) {
  RankSearchState st = search_state(10, 7, {2, 3}, 11);
  st.alpha.mutable_data()[0] = std::log(3.0);
  const auto w = st.weights();
  EXPECT_NEAR(w[0], 0.75, 1e-15);
  EXPECT_NEAR(w[1], 0.25, 1e-15);
}

TEST(MixedCorrection, DropPathKeepsExpectation) {
  Rng init(12);
  RankSearchState st = RankSearchState::init(6, 5, {1, 2}, init, Rng(13), 0.5);
  Rng rng(14);
  for (auto& a : st.adapters) fill_random(a.up, rng, 1.0);
  const Tensor x = Tensor::randn({3, 6}, rng);
  st.training = false;
  const Tensor full = lowrank::mixed_correction(x, st);
  st.training = true;
  Tensor acc = Tensor::zeros({3, 5});
  const int trials = 4000;
  for (int i = 0; i < trials; ++i) acc = ops::add(acc, lowrank::mixed_correction(x, st));
  acc = ops::scale(acc, 1.0 / trials);
  double scale = 0.0;
  for (double v : full.data()) scale = std::max(scale, std::abs(v));
  EXPECT_LE(max_abs_diff(acc, full), 0.1 * scale);
}

TEST(SelectRank, ArgmaxTiesAndShift) {
  Rng init(15);
  RankSearchState st = RankSearchState::init(40, 40, {10, 20, 30}, init, Rng(16), 0.0);
  auto set = [&](std::vector<double> a) { std::copy(a.begin(), a.end(), st.alpha.mutable_data().begin()); };
  set({0.1, 0.5, 0.2});
  EXPECT_EQ(lowrank::select_rank(st), 20u);
  set({0.4, 0.1, 0.4});
  EXPECT_EQ(lowrank::select_rank(st), 10u);
  set({0.1, 0.4, 0.4});
  EXPECT_EQ(lowrank::select_rank(st), 20u);
  Rng rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> a{rng.normal(), rng.normal(), rng.normal()};
    set(a);
    const std::size_t r = lowrank::select_rank(st);
    const double c = rng.uniform(-50.0, 50.0);
    for (double& v : a) v += c;
    set(a);
    EXPECT_EQ(lowrank::select_rank(st), r);
  }
}

TEST(FeasibleCandidates, DropsRanksAtOrAboveMinDim) {
  std::vector<std::string> warnings;
  EXPECT_EQ(lowrank::feasible_candidates({10, 20, 50}, 32, 16, &warnings), (std::vector<std::size_t>{10}));
  EXPECT_EQ(warnings.size(), 2u);
  EXPECT_TRUE(lowrank::feasible_candidates({10}, 8, 8).empty());
  EXPECT_THROW(lowrank::feasible_candidates({0}, 8, 8), ContractError);
}

TEST(SearchState, OverheadSumsCandidateParameters) {
  Rng init(18);
  const RankSearchState st = RankSearchState::init(6, 5, {2, 4}, init, Rng(19), 0.1);
  EXPECT_EQ(st.overhead(), 6u * 11u);
  EXPECT_EQ(st.adapter_parameters().size(), 4u);
}

TEST(Bilevel, ZeroLearningRatesLeaveEverythingUnchanged) {
  SearchFixture f = search_fixture({2, 3});
  const auto before = snapshot(f.blk);
  auto opt = lowrank::BilevelOptimizer::for_block(f.blk, 0.0, 0.0);
  for (int i = 0; i < 3; ++i) lowrank::bilevel_step(f.blk, f.train, f.val, opt);
  EXPECT_EQ(snapshot(f.blk), before);
}

TEST(Bilevel, SingleCandidateLogitNeverMoves) {
  SearchFixture f = search_fixture({2});
  auto opt = lowrank::BilevelOptimizer::for_block(f.blk, 1e-2, 1e-1);
  std::vector<double> alpha_before;
  for (const LinearLayer* l : f.blk.linears()) alpha_before.push_back(l->search->alpha[0]);
  for (int i = 0; i < 5; ++i) lowrank::bilevel_step(f.blk, f.train, f.val, opt);
  std::size_t k = 0;
  for (const LinearLayer* l : f.blk.linears()) EXPECT_EQ(l->search->alpha[0], alpha_before[k++]);
}

TEST(Bilevel, BaseParametersStayFrozen) {
  SearchFixture f = search_fixture({2, 3});
  const auto before = snapshot(f.blk);
  auto opt = lowrank::BilevelOptimizer::for_block(f.blk, 1e-2, 1e-2);
  double first = 0.0, last = 0.0;
  for (int i = 0; i < 20; ++i) {
    const auto l = lowrank::bilevel_step(f.blk, f.train, f.val, opt);
    if (i == 0) first = l.train;
    last = l.train;
  }
  const auto after = snapshot(f.blk);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(after[k], before[k]);
  std::size_t idx = 4;
  for (const LinearLayer* l : f.blk.linears()) {
    EXPECT_EQ(after[idx], before[idx]) << l->name << ".weight";
    EXPECT_EQ(after[idx + 1], before[idx + 1]) << l->name << ".bias";
    EXPECT_NE(after[idx + 2], before[idx + 2]) << l->name << ".alpha";
    idx += 2 + 1 + 2 * l->search->size();
  }
  EXPECT_LT(last, first);
}

TEST(SearchBlockRanks, ReplacesSearchWithFreshAdapters) {
  Rng rng(20);
  ModelGraph g = ModelGraph::init(testkit::tiny_block_config(), rng);
  TransformerBlock blk = g.blocks[0];
  const Tensor x = Tensor::randn({8, 4, 8}, rng);
  const Tensor y = block_forward(x, blk, Mode::fp);
  recon::calibrate_block_quantizers(blk, x, 3, 3, true);
  lowrank::SearchConfig cfg;
  cfg.candidates = {2, 4, 8};
  cfg.iters = 4;
  cfg.batch_size = 2;
  cfg.record_every = 2;
  const auto reports = lowrank::search_block_ranks(blk, 0, x, y, cfg);
  ASSERT_EQ(reports.size(), 4u);
  std::size_t k = 0;
  for (const LinearLayer* l : blk.linears()) {
    const auto& r = reports[k++];
    EXPECT_FALSE(l->search.has_value());
    ASSERT_TRUE(l->adapter.has_value());
    EXPECT_EQ(l->adapter->rank(), r.chosen_rank);
    for (double v : l->adapter->up.data()) EXPECT_EQ(v, 0.0);
    EXPECT_EQ(r.trajectory_iters, (std::vector<std::size_t>{0, 2, 4}));
    EXPECT_EQ(r.final_alpha.size(), r.candidates.size());
  }
  // Every layer here has min(in, out) = 8, so rank 8 is dropped with a warning.
  EXPECT_EQ(reports[0].candidates, (std::vector<std::size_t>{2, 4}));
  EXPECT_EQ(reports[0].warnings.size(), 1u);
  EXPECT_EQ(reports[0].search_overhead, 2u * (8 + 24) + 4u * (8 + 24));
}

TEST(AdapterFit, RealizableTargetIsRecovered) {
  Rng rng(21);
  LinearLayer l = make_layer(6, 5, rng);
  const Tensor x = Tensor::randn({64, 6}, rng);
  const Tensor true_delta = ops::matmul(Tensor::randn({6, 2}, rng, 0.5), Tensor::randn({2, 5}, rng, 0.5));
  const Tensor target = ops::add(ops::add(ops::matmul(x, l.weight), ops::matmul(x, true_delta)), *l.bias);
  l.adapter = lowrank::LowRankAdapter::init(6, 5, 2, rng, 0.1);
  l.adapter->down.set_requires_grad(true);
  l.adapter->up.set_requires_grad(true);
  Adam::Options o;
  o.lr = 1e-2;
  Adam opt(l.adapter->parameters(), o);
  double loss = 0.0;
  for (int it = 0; it < 4000; ++it) {
    opt.zero_grad();
    const Tensor diff = ops::sub(lowrank::adapter_forward(x, l, false), target);
    const Tensor lt = ops::mean(ops::square(diff));
    loss = lt.item();
    lt.backward();
    opt.step();
  }
  EXPECT_LT(loss, 1e-6);
}
