#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "varp/errors.hpp"
#include "varp/gradcheck.hpp"
#include "varp/ops.hpp"
#include "varp/optim.hpp"

using namespace varp;

namespace {

// Independent per-row log-sum-exp oracle.
double ce_oracle(const std::vector<double>& logits, std::size_t v, const std::vector<int>& targets) {
  double total = 0.0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    double mx = -1e300;
    for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, logits[r * v + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) s += std::exp(logits[r * v + j] - mx);
    total += mx + std::log(s) - logits[r * v + static_cast<std::size_t>(targets[r])];
  }
  return total / static_cast<double>(targets.size());
}

std::vector<double> softmax_oracle(const std::vector<double>& x) {
  double mx = -1e300;
  for (double v : x) mx = std::max(mx, v);
  std::vector<double> p(x.size());
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (p[i] = std::exp(x[i] - mx));
  for (double& v : p) v /= s;
  return p;
}

}  // namespace

TEST(Tensor, ShapeInvariant) {
  EXPECT_THROW(Tensor::from({2, 3}, std::vector<double>(5, 0.0)), ContractError);
  EXPECT_THROW(Tensor::zeros({2, 0}), ContractError);
  EXPECT_THROW(Tensor::from({1}, {std::nan("")}), NumericError);
  auto t = Tensor::zeros({2, 3});
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_FALSE(t.has_grad());
}

TEST(SoftmaxCrossEntropy, UniformLogitsGiveLogV) {
  auto logits = Tensor::full({4, 8}, 0.3);
  std::vector<int> targets{0, 3, 7, 5};
  EXPECT_NEAR(softmax_cross_entropy(logits, targets).item(), std::log(8.0), 1e-12);
}

TEST(SoftmaxCrossEntropy, SaturatedLogitsGiveZero) {
  std::vector<double> x(5, 0.0);
  x[2] = 1e6;
  auto logits = Tensor::from({1, 5}, x);
  std::vector<int> targets{2};
  EXPECT_NEAR(softmax_cross_entropy(logits, targets).item(), 0.0, 1e-9);
}

TEST(SoftmaxCrossEntropy, MatchesScalarLoopOracle) {
  std::mt19937_64 rng(7);
  auto logits = Tensor::randn({3, 5}, rng, 2.0);
  std::vector<int> targets{0, 2, 4};
  std::vector<double> x(logits.data().begin(), logits.data().end());
  EXPECT_NEAR(softmax_cross_entropy(logits, targets).item(), ce_oracle(x, 5, targets), 1e-12);
}

TEST(SoftmaxCrossEntropy, Errors) {
  auto logits = Tensor::zeros({2, 3});
  std::vector<int> bad{0, 3};
  EXPECT_THROW(softmax_cross_entropy(logits, bad), IndexError);
  std::vector<int> neg{-1, 0};
  EXPECT_THROW(softmax_cross_entropy(logits, neg), IndexError);
}

TEST(KlDivergence, IdenticalIsZero) {
  std::mt19937_64 rng(3);
  auto t = Tensor::randn({4, 6}, rng, 1.5);
  EXPECT_EQ(kl_divergence(t, t.clone()).item(), 0.0);
}

TEST(KlDivergence, MatchesExplicitOracle) {
  auto teacher = Tensor::zeros({1, 4});
  auto student = Tensor::from({1, 4}, {10.0, 0.0, 0.0, 0.0});
  auto p = softmax_oracle({0, 0, 0, 0});
  auto q = softmax_oracle({10, 0, 0, 0});
  double expected = 0.0;
  for (int i = 0; i < 4; ++i) expected += p[i] * std::log(p[i] / q[i]);
  EXPECT_NEAR(kl_divergence(teacher, student).item(), expected, 1e-10);
}

TEST(KlDivergence, TeacherReceivesNoGradient) {
  std::mt19937_64 rng(5);
  auto teacher = Tensor::randn({3, 5}, rng, 1.0, true);
  auto student = Tensor::randn({3, 5}, rng, 1.0, true);
  teacher.zero_grad();
  backward(kl_divergence(teacher, student));
  for (double g : teacher.grad()) EXPECT_EQ(g, 0.0);
  double norm = 0.0;
  for (double g : student.grad()) norm += std::abs(g);
  EXPECT_GT(norm, 0.0);
}

TEST(KlDivergence, ShapeMismatch) {
  EXPECT_THROW(kl_divergence(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), ContractError);
}

TEST(Backward, SumOfSquares) {
  auto x = Tensor::from({3}, {1, 2, 3}, true);
  backward(sum(mul(x, x)));
  ASSERT_TRUE(x.has_grad());
  EXPECT_EQ(x.grad()[0], 2.0);
  EXPECT_EQ(x.grad()[1], 4.0);
  EXPECT_EQ(x.grad()[2], 6.0);
}

TEST(Backward, SharedInputBranchesAdd) {
  auto x = Tensor::from({2}, {0.5, -1.5}, true);
  // d/dx [sum(3x) + sum(exp(x))] = 3 + exp(x)
  backward(add(sum(scale(x, 3.0)), sum(exp(x))));
  EXPECT_DOUBLE_EQ(x.grad()[0], 3.0 + std::exp(0.5));
  EXPECT_DOUBLE_EQ(x.grad()[1], 3.0 + std::exp(-1.5));
}

TEST(Backward, AccumulatesUntilZeroGrad) {
  auto x = Tensor::from({1}, {2.0}, true);
  backward(sum(mul(x, x)));
  backward(sum(mul(x, x)));
  EXPECT_EQ(x.grad()[0], 8.0);
  x.zero_grad();
  backward(sum(x));
  EXPECT_EQ(x.grad()[0], 1.0);
}

TEST(Backward, RequiresScalarRootAndConsumesTape) {
  auto x = Tensor::from({2}, {1, 2}, true);
  EXPECT_THROW(backward(mul(x, x)), ContractError);
  auto loss = sum(mul(x, x));
  backward(loss);
  EXPECT_THROW(backward(loss), ContractError);
}

TEST(Tape, TopologicalAndVisitsOnce) {
  auto x = Tensor::from({2}, {1, 2}, true);
  auto y = exp(x);
  auto z = add(mul(y, y), y);
  auto root = sum(z);
  auto tape = Tape::record(root);
  // x, y, mul, add, sum
  EXPECT_EQ(tape.size(), 5u);
  EXPECT_EQ(tape.nodes().front(), x.node());
  EXPECT_EQ(tape.nodes().back(), root.node());
  for (std::size_t i = 0; i < tape.size(); ++i) {
    for (const auto& in : tape.nodes()[i]->inputs) {
      auto pos = std::find(tape.nodes().begin(), tape.nodes().end(), in.get()) - tape.nodes().begin();
      EXPECT_LT(static_cast<std::size_t>(pos), i);
    }
  }
}

TEST(Backward, MatmulCrossEntropyMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  auto x = Tensor::randn({4, 6}, rng, 1.0, true);
  auto w = Tensor::randn({6, 5}, rng, 0.5, true);
  std::vector<int> targets{1, 0, 4, 2};
  std::vector<Tensor> params{x, w};
  auto res = finite_diff_check([&] { return softmax_cross_entropy(matmul(x, w), targets); }, params);
  EXPECT_LT(res.max_rel_error, 1e-4);
  EXPECT_EQ(res.coords_checked, 54u);
}

TEST(GradCheck, QuadraticIsNearlyExact) {
  auto x = Tensor::from({3}, {0.3, -1.2, 2.5}, true);
  std::vector<Tensor> params{x};
  auto res = finite_diff_check([&] { return sum(mul(x, x)); }, params);
  EXPECT_LT(res.max_rel_error, 1e-8);
}

TEST(GradCheck, DetectsCorruptedGradient) {
  std::mt19937_64 rng(2);
  auto x = Tensor::randn({3, 4}, rng, 1.0, true);
  std::vector<Tensor> params{x};
  auto fn = [&] { return sum(gelu(mul(x, x))); };
  auto grads = analytic_gradients(fn, params);
  for (double& g : grads[0]) g *= 1.01;
  auto res = finite_diff_check(fn, params, grads);
  EXPECT_GT(res.max_rel_error, 5e-3);
}

TEST(Ops, SoftmaxRowsSumToOne) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = Tensor::randn({7, 13}, rng, 5.0);
    auto y = softmax(x);
    for (std::size_t r = 0; r < 7; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < 13; ++j) s += y.data()[r * 13 + j];
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(Ops, LossesAreNonNegative) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> pick(0, 9);
  for (int trial = 0; trial < 50; ++trial) {
    auto a = Tensor::randn({5, 10}, rng, 3.0);
    auto b = Tensor::randn({5, 10}, rng, 3.0);
    std::vector<int> t(5);
    for (int& v : t) v = pick(rng);
    EXPECT_GE(softmax_cross_entropy(a, t).item(), 0.0);
    EXPECT_GE(kl_divergence(a, b).item(), 0.0);
  }
}

TEST(Ops, TransposeRoundTripAndBroadcast) {
  std::mt19937_64 rng(1);
  auto x = Tensor::randn({2, 3, 4}, rng, 1.0);
  auto y = transpose(transpose(x, 0, 2), 0, 2);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(x.data()[i], y.data()[i]);
  auto t = transpose(x, 1, 2);
  EXPECT_EQ(t.shape(), (Shape{2, 4, 3}));
  EXPECT_EQ(t.data()[0 * 12 + 1 * 3 + 2], x.data()[0 * 12 + 2 * 4 + 1]);
  auto bias = Tensor::from({1, 4}, {1, 2, 3, 4});
  auto s = add(x, bias);
  EXPECT_EQ(s.data()[5], x.data()[5] + 2.0);
  EXPECT_THROW(add(x, Tensor::zeros({3, 3})), ContractError);
}

TEST(Ops, ResizeIdentityAndConstant) {
  auto c = Tensor::full({2, 2, 3}, 1.5);
  auto up = resize_bilinear(c, 5, 7);
  for (double v : up.data()) EXPECT_DOUBLE_EQ(v, 1.5);
  std::mt19937_64 rng(6);
  auto x = Tensor::randn({4, 4, 2}, rng, 1.0);
  auto same = resize_bilinear(x, 4, 4);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(same.data()[i], x.data()[i]);
  // Corner alignment: corners of the output equal corners of the input.
  auto big = resize_bilinear(x, 7, 9);
  EXPECT_DOUBLE_EQ(big.data()[0], x.data()[0]);
  EXPECT_DOUBLE_EQ(big.data()[(6 * 9 + 8) * 2 + 1], x.data()[(3 * 4 + 3) * 2 + 1]);
}

// Hand-rolled generator of random graphs over the supported primitives.
TEST(Property, RandomGraphsMatchFiniteDifferences) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t r = 3 + rng() % 3, c = 3 + rng() % 3;
    auto a = Tensor::randn({r, c}, rng, 0.8, true);
    auto b = Tensor::randn({r, c}, rng, 0.8, true);
    auto w = Tensor::randn({c, r}, rng, 0.8, true);
    auto probe = Tensor::randn({r, c}, rng, 1.0);
    std::vector<int> ops;
    for (int i = 0; i < 6; ++i) ops.push_back(static_cast<int>(rng() % 11));
    std::vector<int> rows;
    for (std::size_t i = 0; i < r; ++i) rows.push_back(static_cast<int>(rng() % r));

    auto fn = [&]() {
      Tensor h = a;
      for (int op : ops) {
        switch (op) {
          case 0: h = add(h, b); break;
          case 1: h = mul(h, b); break;
          case 2: h = transpose(matmul(matmul(h, w), h), 0, 1); h = transpose(h, 0, 1); break;
          case 3: h = exp(scale(h, 0.3)); break;
          case 4: h = log(add_scalar(mul(h, h), 1.0)); break;
          case 5: h = gelu(h); break;
          case 6: h = layer_norm(h); break;
          case 7: h = softmax(h); break;
          case 8: h = reshape(transpose(reshape(h, {r, c}), 0, 1), {r, c}); break;
          case 9: h = gather_rows(h, rows); break;
          default: {
            auto grid = reshape(h, {r, c, 1});
            h = reshape(resize_bilinear(resize_bilinear(grid, r + 2, c + 1), r, c), {r, c});
          }
        }
      }
      return add(sum(mul(h, probe)), mean(h));
    };
    std::vector<Tensor> params{a, b, w};
    auto res = finite_diff_check(fn, params);
    EXPECT_LT(res.max_rel_error, 1e-4) << "trial " << trial;
  }
}

TEST(Property, Determinism) {
  auto run = [] {
    std::mt19937_64 rng(99);
    auto x = Tensor::randn({5, 5}, rng, 1.0, true);
    auto y = softmax(matmul(x, transpose(x, 0, 1)));
    backward(sum(mul(y, y)));
    std::vector<double> out(y.data().begin(), y.data().end());
    out.insert(out.end(), x.grad().begin(), x.grad().end());
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(AdamW, ZeroGradientNoDecayLeavesParams) {
  auto p = Tensor::from({3}, {1.0, -2.0, 0.5}, true);
  std::vector<Tensor> params{p};
  auto state = AdamWState::for_params(params, {});
  std::vector<std::vector<double>> g{{0, 0, 0}};
  adamw_step(params, g, state);
  EXPECT_EQ(p.data()[0], 1.0);
  EXPECT_EQ(p.data()[1], -2.0);
  EXPECT_EQ(p.data()[2], 0.5);
  EXPECT_EQ(state.step, 1);
}

TEST(AdamW, SingleStepMatchesHandEvaluation) {
  auto p = Tensor::from({1}, {0.5}, true);
  std::vector<Tensor> params{p};
  AdamWConfig cfg{.lr = 0.1, .beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8, .weight_decay = 0.0};
  auto state = AdamWState::for_params(params, cfg);
  std::vector<std::vector<double>> g{{1.0}};
  adamw_step(params, g, state);
  // m = 0.1, v = 0.001; bias-corrected both equal 1.
  const double m = (1 - 0.9) * 1.0, v = (1 - 0.999) * 1.0;
  const double expected = 0.5 - 0.1 * (m / (1 - 0.9)) / (std::sqrt(v / (1 - 0.999)) + 1e-8);
  EXPECT_NEAR(p.data()[0], expected, 1e-12);
}

TEST(AdamW, DecoupledDecayShrinksByExactAmount) {
  auto p = Tensor::from({2}, {2.0, -4.0}, true);
  std::vector<Tensor> params{p};
  AdamWConfig cfg{.lr = 0.01, .weight_decay = 0.1};
  auto state = AdamWState::for_params(params, cfg);
  std::vector<std::vector<double>> g{{0, 0}};
  adamw_step(params, g, state);
  EXPECT_EQ(p.data()[0], 2.0 - 0.01 * 0.1 * 2.0);
  EXPECT_EQ(p.data()[1], -4.0 - 0.01 * 0.1 * -4.0);
}

TEST(AdamW, NanGradientLeavesStateUntouched) {
  auto p = Tensor::from({2}, {1.0, 1.0}, true);
  std::vector<Tensor> params{p};
  auto state = AdamWState::for_params(params, {});
  std::vector<std::vector<double>> g{{0.5, std::nan("")}};
  EXPECT_THROW(adamw_step(params, g, state), NumericError);
  EXPECT_EQ(state.step, 0);
  EXPECT_EQ(state.m[0][0], 0.0);
  EXPECT_EQ(p.data()[0], 1.0);
}
