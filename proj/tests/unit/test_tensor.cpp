// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck_suite.hpp"
#include "vitptq/errors.hpp"
#include "vitptq/ops.hpp"
#include "vitptq/rng.hpp"

using namespace vitptq;

namespace {

Tensor t2(std::size_t r, std::size_t c, std::vector<double> v) { return Tensor({r, c}, std::move(v)); }

void expect_values(const Tensor& t, const std::vector<double>& want, double tol) {
  ASSERT_EQ(t.numel(), want.size());
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(t[i], want[i], tol) << "at " << i;
}

}  // namespace

TEST(Tensor, ShapeAndDataAgree) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
  Tensor s = Tensor::scalar(3.0);
  EXPECT_TRUE(s.shape().empty());
  EXPECT_EQ(s.numel(), 1u);
  EXPECT_EQ(s.item(), 3.0);
}

TEST(Matmul, IdentityLeavesOperandUnchanged) {
  Rng rng(1);
  Tensor b = Tensor::randn({3, 5}, rng);
  expect_values(ops::matmul(Tensor::eye(3), b), std::vector<double>(b.data().begin(), b.data().end()), 0.0);
}

TEST(Matmul, HandEvaluation) {
  expect_values(ops::matmul(t2(2, 2, {1, 2, 3, 4}), t2(2, 1, {1, 1})), {3, 7}, 0.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    ops::matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4x2]"), std::string::npos) << msg;
  }
}

TEST(Matmul, GradientOfSumIsBroadcastColumnSums) {
  Rng rng(2);
  Tensor a = testkit::leaf(Tensor::randn({3, 4}, rng));
  Tensor b = Tensor::randn({4, 5}, rng);
  ops::sum(ops::matmul(a, b)).backward();
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t k = 0; k < 4; ++k) {
      double row = 0.0;
      for (std::size_t j = 0; j < 5; ++j) row += b.at({k, j});
      EXPECT_NEAR(a.grad()[i * 4 + k], row, 1e-12);
    }
  }
}

TEST(Softmax, UniformOnEqualInputs) { expect_values(ops::softmax(Tensor({3}, 0.0), 0), {1.0 / 3, 1.0 / 3, 1.0 / 3}, 1e-15); }

TEST(Softmax, StableForLargeLogits) {
  const Tensor p = ops::softmax(Tensor({2}, std::vector<double>{1000.0, 0.0}), 0);
  EXPECT_TRUE(std::isfinite(p[0]) && std::isfinite(p[1]));
  EXPECT_NEAR(p[0], 1.0, 1e-15);
  EXPECT_NEAR(p[1], 0.0, 1e-15);
}

TEST(Softmax, DirectEvaluation) {
  expect_values(ops::softmax(Tensor({3}, std::vector<double>{1, 2, 3}), 0), {0.09003, 0.24473, 0.66524}, 1e-5);
}

TEST(Softmax, SlicesSumToOne) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = Tensor::uniform({4, 6, 5}, rng, -50.0, 50.0);
    for (std::size_t axis = 0; axis < 3; ++axis) {
      const Tensor s = ops::sum_axis(ops::softmax(x, axis), axis);
      for (double v : s.data()) EXPECT_NEAR(v, 1.0, 1e-12);
    }
  }
}

TEST(LayerNorm, ConstantRowGivesZeros) {
  const Tensor y = ops::layernorm(Tensor({2, 4}, 3.0), Tensor::ones({4}), Tensor::zeros({4}), 1e-6);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, ZeroGammaGivesBeta) {
  Rng rng(4);
  const Tensor y = ops::layernorm(Tensor::randn({3, 5}, rng), Tensor::zeros({5}), Tensor({5}, 0.25), 1e-6);
  for (double v : y.data()) EXPECT_EQ(v, 0.25);
}

TEST(LayerNorm, RowStatistics) {
  Rng rng(5);
  const double eps = 1e-6;
  const Tensor x = Tensor::randn({4, 8}, rng, 2.0);
  const Tensor y = ops::layernorm(x, Tensor::ones({8}), Tensor::zeros({8}), eps);
  for (std::size_t r = 0; r < 4; ++r) {
    double m = 0.0, v = 0.0, xm = 0.0, xv = 0.0;
    for (std::size_t c = 0; c < 8; ++c) {
      m += y.at({r, c}) / 8;
      xm += x.at({r, c}) / 8;
    }
    for (std::size_t c = 0; c < 8; ++c) {
      v += (y.at({r, c}) - m) * (y.at({r, c}) - m) / 8;
      xv += (x.at({r, c}) - xm) * (x.at({r, c}) - xm) / 8;
    }
    EXPECT_LE(std::abs(m), 1e-10);
    EXPECT_NEAR(v, xv / (xv + eps), 1e-12);
  }
}

TEST(Gelu, ReferenceValues) {
  const Tensor y = ops::gelu(Tensor({3}, std::vector<double>{0.0, 10.0, 1.0}));
  EXPECT_EQ(y[0], 0.0);
  EXPECT_NEAR(y[1], 10.0, 1e-4);
  EXPECT_NEAR(y[2], 0.8412, 1e-3);
  const Tensor e = ops::gelu(Tensor({1}, 1.0), ops::GeluKind::erf);
  EXPECT_NEAR(e[0], 0.5 * (1.0 + std::erf(1.0 / std::sqrt(2.0))), 1e-15);
}

TEST(Gelu, MonotoneOnGrid) {
  std::vector<double> grid;
  for (int i = 0; i <= 2000; ++i) grid.push_back(-0.75 + 10.0 * i / 2000.0);
  for (auto kind : {ops::GeluKind::tanh, ops::GeluKind::erf}) {
    const Tensor y = ops::gelu(Tensor({grid.size()}, grid), kind);
    for (std::size_t i = 1; i < grid.size(); ++i) EXPECT_GE(y[i], y[i - 1]);
  }
}

TEST(Backward, SumGivesOnes) {
  Tensor x = testkit::leaf(Tensor({2, 3}, 0.5));
  ops::sum(x).backward();
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquareGivesTwoX) {
  Rng rng(6);
  Tensor x = testkit::leaf(Tensor::randn({5}, rng));
  ops::sum(ops::mul(x, x)).backward();
  for (std::size_t i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2.0 * x[i]);
}

TEST(Backward, RepeatedCallsAccumulate) {
  Tensor x = testkit::leaf(Tensor({3}, 1.0));
  const Tensor loss = ops::sum(ops::scale(x, 2.0));
  loss.backward();
  loss.backward();
  for (double g : x.grad()) EXPECT_EQ(g, 4.0);
  x.zero_grad();
  loss.backward();
  for (double g : x.grad()) EXPECT_EQ(g, 2.0);
}

TEST(Backward, NonScalarIsContractError) {
  Tensor x = testkit::leaf(Tensor({3}, 1.0));
  EXPECT_THROW(ops::scale(x, 2.0).backward(), ContractError);
}

TEST(Backward, NoGradGuardSkipsTape) {
  Tensor x = testkit::leaf(Tensor({3}, 1.0));
  NoGradGuard guard;
  const Tensor y = ops::scale(x, 2.0);
  EXPECT_TRUE(y.is_leaf());
  EXPECT_FALSE(y.requires_grad());
}

TEST(Determinism, SameSeedSameValuesAndGradients) {
  auto run = [] {
    Rng rng(7);
    ModelGraph g = ModelGraph::init(testkit::tiny_block_config(), rng);
    Tensor x = testkit::leaf(Tensor::randn({2, 4, 8}, rng));
    const Tensor y = block_forward(x, g.blocks[0], Mode::fp);
    ops::sum(ops::square(y)).backward();
    std::vector<double> out(y.data().begin(), y.data().end());
    out.insert(out.end(), x.grad().begin(), x.grad().end());
    return out;
  };
  EXPECT_EQ(run(), run());
}

class Gradcheck : public ::testing::TestWithParam<std::size_t> {};

TEST_P(Gradcheck, MatchesCentralDifferences) {
  const auto suite = testkit::gradcheck_suite();
  const auto& c = suite.at(GetParam());
  for (std::uint64_t seed = 100; seed < 105; ++seed) {
    const auto r = c.run(seed);
    EXPECT_LE(r.max_rel_error, 1e-4) << c.name << " seed " << seed << " tensor " << r.worst;
  }
}

INSTANTIATE_TEST_SUITE_P(AllOps, Gradcheck, ::testing::Range<std::size_t>(0, testkit::gradcheck_suite().size()),
                         [](const ::testing::TestParamInfo<std::size_t>& info) {
                           return testkit::gradcheck_suite().at(info.param).name;
                         });
