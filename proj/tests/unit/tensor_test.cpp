#include <gtest/gtest.h>

#include <cmath>

#include "rmkd/autodiff.hpp"
#include "rmkd/error.hpp"
#include "rmkd/gradcheck.hpp"
#include "rmkd/optim.hpp"
#include "rmkd/rng.hpp"

using namespace rmkd;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = rng.uniform(lo, hi);
  return t;
}

// Independent central-difference derivative of a plain function of one tensor.
Tensor numeric_grad(const std::function<double(const Tensor&)>& f, Tensor x, double eps = 1e-6) {
  Tensor g(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double saved = x[i];
    x[i] = saved + eps;
    const double plus = f(x);
    x[i] = saved - eps;
    const double minus = f(x);
    x[i] = saved;
    g[i] = (plus - minus) / (2 * eps);
  }
  return g;
}

double check_unary(const std::function<Var(Var)>& op, const Tensor& input, double jitter = 0.0, std::uint64_t seed = 0) {
  ScalarFn f = [&](Graph& g, std::span<const Var> p) {
    Var y = op(p[0]);
    // Weighted sum so that every output element carries a distinct weight.
    Tensor w = random_tensor(y.shape(), 99);
    return sum(mul(y, g.constant(w)));
  };
  GradCheckOptions opt;
  opt.jitter = jitter;
  opt.seed = seed;
  return grad_check(f, {input}, 1e-6, opt).max_rel_error;
}

}  // namespace

TEST(Matmul, IdentityTimesIdentity) {
  Graph g;
  Tensor eye = Tensor::matrix({{1, 0}, {0, 1}});
  Var y = matmul(g.constant(eye), g.constant(eye));
  EXPECT_EQ(y.value(), eye);
}

TEST(Matmul, HandArithmetic) {
  Graph g;
  Var y = matmul(g.constant(Tensor::matrix({{1, 2}, {3, 4}})), g.constant(Tensor::matrix({{1}, {1}})));
  EXPECT_EQ(y.value(), Tensor::matrix({{3}, {7}}));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Graph g;
  try {
    matmul(g.constant(Tensor({2, 3})), g.constant(Tensor({2, 3})));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3] x [2x3]"), std::string::npos) << e.what();
  }
}

TEST(Matmul, GradientOfSumIsOnesTimesBTransposed) {
  const Tensor a = random_tensor({3, 4}, 1);
  const Tensor b = random_tensor({4, 2}, 2);
  Graph g;
  Var va = g.parameter(a);
  Var loss = sum(matmul(va, g.constant(b)));
  g.backward(loss);
  const Tensor grad = g.grad(va);
  // Closed form: d/dA sum(AB) = 1 B^T, i.e. every row equals the row sums of B.
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t k = 0; k < 4; ++k) {
      EXPECT_NEAR(grad.at(i, k), b.at(k, 0) + b.at(k, 1), 1e-12);
    }
  }
  const Tensor fd = numeric_grad(
      [&](const Tensor& x) {
        double s = 0;
        for (std::size_t i = 0; i < 3; ++i)
          for (std::size_t j = 0; j < 2; ++j)
            for (std::size_t k = 0; k < 4; ++k) s += x.at(i, k) * b.at(k, j);
        return s;
      },
      a);
  EXPECT_LT(max_abs_diff(grad, fd), 1e-6);
}

TEST(Matmul, AssociativityWithinTolerance) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Graph g;
    Var a = g.constant(random_tensor({5, 5}, seed * 3));
    Var b = g.constant(random_tensor({5, 5}, seed * 3 + 1));
    Var c = g.constant(random_tensor({5, 5}, seed * 3 + 2));
    EXPECT_LT(max_abs_diff(matmul(matmul(a, b), c).value(), matmul(a, matmul(b, c)).value()), 1e-9);
  }
}

TEST(Elementwise, AddAndRelu) {
  Graph g;
  EXPECT_EQ(add(g.constant(Tensor::vector({1, 2})), g.constant(Tensor::vector({3, 4}))).value(),
            Tensor::vector({4, 6}));
  EXPECT_EQ(relu(g.constant(Tensor::vector({-1, 0, 2}))).value(), Tensor::vector({0, 0, 2}));
}

TEST(Elementwise, BroadcastStretchesSizeOneAxes) {
  Graph g;
  Var m = g.constant(Tensor::matrix({{1, 2, 3}, {4, 5, 6}}));
  EXPECT_EQ(add(m, g.constant(Tensor::matrix({{10, 20, 30}}))).value(), Tensor::matrix({{11, 22, 33}, {14, 25, 36}}));
  EXPECT_EQ(mul(m, g.constant(Tensor::matrix({{2}, {0}}))).value(), Tensor::matrix({{2, 4, 6}, {0, 0, 0}}));
}

TEST(Elementwise, IncompatibleShapesThrow) {
  Graph g;
  EXPECT_THROW(add(g.constant(Tensor({2, 3})), g.constant(Tensor({3, 2}))), DimensionError);
  EXPECT_THROW(add(g.constant(Tensor({2, 3})), g.constant(Tensor({3}))), DimensionError);
}

TEST(Elementwise, MulGradientCheck) {
  const Tensor a = random_tensor({3, 4}, 5);
  const Tensor b = random_tensor({3, 4}, 6);
  ScalarFn f = [](Graph&, std::span<const Var> p) { return sum(mul(mul(p[0], p[1]), p[0])); };
  EXPECT_LT(grad_check(f, {a, b}, 1e-6).max_rel_error, 1e-6);
}

TEST(Elementwise, BroadcastGradientsAccumulate) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    ScalarFn f = [](Graph& g, std::span<const Var> p) {
      Var y = mul(add(p[0], p[1]), p[2]);
      return sum(mul(y, g.constant(random_tensor(y.shape(), 7))));
    };
    auto r = grad_check(f, {random_tensor({4, 3}, seed), random_tensor({1, 3}, seed + 100), random_tensor({4, 1}, seed + 200)},
                        1e-6);
    EXPECT_LT(r.max_rel_error, 1e-5) << "seed " << seed;
  }
}

TEST(Elementwise, UnaryOpsPassGradientChecks) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Tensor x = random_tensor({3, 4}, seed);
    EXPECT_LT(check_unary([](Var v) { return exp(v); }, x), 1e-5);
    EXPECT_LT(check_unary([](Var v) { return relu(v); }, x, 1e-3, seed), 1e-5);
    EXPECT_LT(check_unary([](Var v) { return scale(v, -2.5); }, x), 1e-5);
    EXPECT_LT(check_unary([](Var v) { return transpose(v); }, x), 1e-5);
    EXPECT_LT(check_unary([](Var v) { return mean_rows(v); }, x), 1e-5);
    EXPECT_LT(check_unary([](Var v) { return slice_cols(v, 1, 3); }, x), 1e-5);
    EXPECT_LT(check_unary([](Var v) { return reshape(v, {4, 3}); }, x), 1e-5);
  }
}

TEST(Softmax, SymmetricInputGivesUniformRow) {
  Graph g;
  EXPECT_EQ(softmax(g.constant(Tensor::vector({0, 0}))).value(), Tensor::vector({0.5, 0.5}));
  EXPECT_EQ(softmax(g.constant(Tensor::vector({1000, 1000}))).value(), Tensor::vector({0.5, 0.5}));
}

TEST(Softmax, RowsSumToOneStrictlyInsideUnitInterval) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Graph g;
    Var y = softmax(g.constant(random_tensor({6, 7}, seed, -20, 20)));
    for (std::size_t r = 0; r < 6; ++r) {
      double total = 0;
      for (double v : y.value().row(r)) {
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
        total += v;
      }
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
}

TEST(Softmax, JacobianMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    EXPECT_LT(check_unary([](Var v) { return softmax(v); }, random_tensor({5}, seed, -2, 2)), 1e-6);
  }
}

TEST(LayerNorm, ConstantRowNormalizesToZero) {
  Graph g;
  Var y = layer_norm(g.constant(Tensor::matrix({{3, 3, 3, 3}})), g.constant(Tensor({4}, 1.0)),
                     g.constant(Tensor({4}, 0.0)));
  for (double v : y.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, OutputRowsHaveZeroMeanUnitVariance) {
  Graph g;
  Var y = layer_norm(g.constant(random_tensor({4, 6}, 3, -5, 5)), g.constant(Tensor({6}, 1.0)),
                     g.constant(Tensor({6}, 0.0)));
  for (std::size_t r = 0; r < 4; ++r) {
    double mean = 0, var = 0;
    for (double v : y.value().row(r)) mean += v / 6;
    for (double v : y.value().row(r)) var += (v - mean) * (v - mean) / 6;
    EXPECT_LT(std::abs(mean), 1e-9);
    EXPECT_NEAR(var, 1.0, 1e-3);
  }
}

TEST(LayerNorm, GradientCheck) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    ScalarFn f = [](Graph& g, std::span<const Var> p) {
      Var y = layer_norm(p[0], p[1], p[2]);
      return sum(mul(y, g.constant(random_tensor(y.shape(), 11))));
    };
    auto r = grad_check(f, {random_tensor({2, 6}, seed), random_tensor({6}, seed + 1), random_tensor({6}, seed + 2)},
                        1e-6);
    EXPECT_LT(r.max_rel_error, 1e-5) << "seed " << seed;
  }
}

TEST(Conv1d, CenteredDeltaKernelIsIdentity) {
  Graph g;
  Tensor k({3, 1, 1}, std::vector<double>{0, 1, 0});
  Tensor x = Tensor::matrix({{0.5}, {-2}, {3}, {7}});
  EXPECT_EQ(conv1d(g.constant(x), g.constant(k)).value(), x);
}

TEST(Conv1d, BoxKernelUsesZeroPadding) {
  Graph g;
  Tensor k({3, 1, 1}, std::vector<double>{1, 1, 1});
  Var y = conv1d(g.constant(Tensor::matrix({{1}, {1}, {1}})), g.constant(k));
  EXPECT_EQ(y.value(), Tensor::matrix({{2}, {3}, {2}}));
}

TEST(Conv1d, EvenKernelIsAConfigurationError) {
  Graph g;
  EXPECT_THROW(conv1d(g.constant(Tensor({4, 1})), g.constant(Tensor({2, 1, 1}))), ConfigError);
}

TEST(Conv1d, GradientCheckWrtKernelsAndInput) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    ScalarFn f = [](Graph& g, std::span<const Var> p) {
      Var y = conv1d(p[0], p[1]);
      return sum(mul(y, g.constant(random_tensor(y.shape(), 13))));
    };
    auto r = grad_check(f, {random_tensor({7, 2}, seed), random_tensor({3, 2, 3}, seed + 50)}, 1e-6);
    EXPECT_LT(r.max_rel_error, 1e-5) << "seed " << seed;
  }
}

TEST(Mse, Examples) {
  Graph g;
  Var x = g.constant(random_tensor({3, 3}, 1));
  EXPECT_EQ(mse(x, x).value().item(), 0.0);
  EXPECT_EQ(mse(g.constant(Tensor::vector({0, 0})), g.constant(Tensor::vector({2, 0}))).value().item(), 2.0);
  EXPECT_THROW(mse(g.constant(Tensor({2})), g.constant(Tensor({3}))), DimensionError);
}

TEST(Mse, GradientIsTwiceResidualOverCount) {
  const Tensor a = random_tensor({2, 5}, 4);
  const Tensor b = random_tensor({2, 5}, 5);
  Graph g;
  Var va = g.parameter(a);
  g.backward(mse(va, g.constant(b)));
  const Tensor grad = g.grad(va);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(grad[i], 2 * (a[i] - b[i]) / 10.0, 1e-15);
  const Tensor fd = numeric_grad(
      [&](const Tensor& x) {
        double s = 0;
        for (std::size_t i = 0; i < x.numel(); ++i) s += (x[i] - b[i]) * (x[i] - b[i]);
        return s / 10.0;
      },
      a);
  EXPECT_LT(max_abs_diff(grad, fd), 1e-8);
}

TEST(Mse, MaskedRowsAreExcluded) {
  Graph g;
  Var a = g.parameter(Tensor::matrix({{1, 1}, {5, 5}}));
  Var s = squared_error_sum(a, g.constant(Tensor({2, 2}, 0.0)), std::vector<double>{1, 0});
  EXPECT_EQ(s.value().item(), 2.0);
  g.backward(s);
  EXPECT_EQ(g.grad(a), Tensor::matrix({{2, 2}, {0, 0}}));
}

TEST(Backward, SumGivesOnes) {
  Graph g;
  Var x = g.parameter(random_tensor({2, 3}, 1));
  g.backward(sum(x));
  EXPECT_EQ(g.grad(x), Tensor({2, 3}, 1.0));
}

TEST(Backward, NonScalarLossIsAContractError) {
  Graph g;
  Var x = g.parameter(Tensor({2, 2}, 1.0));
  EXPECT_THROW(g.backward(relu(x)), ContractError);
}

TEST(Backward, LinearModelMatchesClosedForm) {
  // loss = mean((W x - y)^2); dL/dW = 2/n (W x - y) x^T
  const Tensor w = random_tensor({3, 4}, 21);
  const Tensor x = random_tensor({4, 1}, 22);
  const Tensor y = random_tensor({3, 1}, 23);
  Graph g;
  Var vw = g.parameter(w);
  g.backward(mse(matmul(vw, g.constant(x)), g.constant(y)));
  const Tensor grad = g.grad(vw);
  for (std::size_t i = 0; i < 3; ++i) {
    double pred = 0;
    for (std::size_t k = 0; k < 4; ++k) pred += w.at(i, k) * x[k];
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(grad.at(i, k), 2.0 / 3.0 * (pred - y[i]) * x[k], 1e-14);
  }
}

TEST(Backward, RepeatedBackwardIsBitIdentical) {
  Graph g;
  Var x = g.parameter(random_tensor({3, 4}, 8));
  Var w = g.parameter(random_tensor({4, 4}, 9));
  Var loss = sum(softmax(matmul(x, w)));
  loss = add(loss, mse(layer_norm(x, g.constant(Tensor({4}, 1.0)), g.constant(Tensor({4}, 0.0))), x));
  g.backward(loss);
  const Tensor gx = g.grad(x), gw = g.grad(w);
  g.backward(loss);
  EXPECT_EQ(g.grad(x), gx);
  EXPECT_EQ(g.grad(w), gw);
}

TEST(Backward, ConstantsReceiveNoGradient) {
  Graph g;
  Var c = g.constant(Tensor({2}, 3.0));
  Var x = g.parameter(Tensor({2}, 1.0));
  Var loss = sum(mul(c, x));
  EXPECT_FALSE(c.requires_grad());
  g.backward(loss);
  EXPECT_EQ(g.grad(c), Tensor({2}, 0.0));
  EXPECT_EQ(g.grad(x), Tensor({2}, 3.0));
}

TEST(Gather, EmbeddingAndRepeatRows) {
  Graph g;
  Var table = g.parameter(Tensor::matrix({{1, 2}, {3, 4}, {5, 6}}));
  const std::uint32_t ids[] = {2, 0, 2};
  Var e = embedding(table, ids);
  EXPECT_EQ(e.value(), Tensor::matrix({{5, 6}, {1, 2}, {5, 6}}));
  g.backward(sum(e));
  EXPECT_EQ(g.grad(table), Tensor::matrix({{1, 1}, {0, 0}, {2, 2}}));
  const std::uint32_t bad[] = {3};
  EXPECT_THROW(embedding(table, bad), InputError);

  const std::uint32_t durations[] = {2, 0, 3};
  Var r = repeat_rows(table, durations);
  EXPECT_EQ(r.value(), Tensor::matrix({{1, 2}, {1, 2}, {5, 6}, {5, 6}, {5, 6}}));
  const std::uint32_t zeros[] = {0, 0, 0};
  EXPECT_THROW(repeat_rows(table, zeros), InputError);
}

TEST(Gather, ConcatColsGradient) {
  ScalarFn f = [](Graph& g, std::span<const Var> p) {
    Var parts[] = {p[0], p[1], p[0]};
    Var y = concat_cols(parts);
    return sum(mul(y, g.constant(random_tensor(y.shape(), 3))));
  };
  EXPECT_LT(grad_check(f, {random_tensor({3, 2}, 1), random_tensor({3, 1}, 2)}, 1e-6).max_rel_error, 1e-6);
}

TEST(Dropout, ZeroRateIsIdentityAndMaskIsSeeded) {
  Graph g;
  Var x = g.constant(random_tensor({4, 4}, 1));
  EXPECT_EQ(dropout(x, 0.0, 5).id(), x.id());
  EXPECT_EQ(dropout(x, 0.5, 5).value(), dropout(x, 0.5, 5).value());
  EXPECT_NE(dropout(x, 0.5, 5).value(), dropout(x, 0.5, 6).value());
  EXPECT_THROW(dropout(x, 1.0, 5), ConfigError);
}

TEST(ClipGradNorm, Examples) {
  std::vector<Tensor> small{Tensor::vector({0.3, 0.4})};
  EXPECT_DOUBLE_EQ(clip_grad_norm(small, 1.0), 0.5);
  EXPECT_EQ(small[0], Tensor::vector({0.3, 0.4}));

  std::vector<Tensor> big{Tensor::vector({3, 4})};
  clip_grad_norm(big, 1.0);
  EXPECT_NEAR(big[0][0], 0.6, 1e-15);
  EXPECT_NEAR(big[0][1], 0.8, 1e-15);
}

TEST(ClipGradNorm, PostClipNormIsMinOfNormAndThresholdAndIdempotent) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    std::vector<Tensor> grads{random_tensor({3, 3}, seed, -2, 2), random_tensor({5}, seed + 1000, -2, 2)};
    const double threshold = rng.uniform(0.1, 6.0);
    const double pre = global_norm(grads);
    const double post = clip_grad_norm(grads, threshold);
    EXPECT_NEAR(post, std::min(pre, threshold), 1e-12);
    EXPECT_NEAR(global_norm(grads), post, 1e-15);
    auto again = grads;
    clip_grad_norm(again, threshold);
    EXPECT_EQ(again, grads);
  }
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  std::vector<Tensor> params{random_tensor({2, 2}, 3)};
  const auto before = params;
  AdamState state(params, {});
  std::vector<Tensor> grads{Tensor({2, 2}, 0.0)};
  adam_step(params, grads, state);
  EXPECT_EQ(params, before);
  EXPECT_EQ(state.step_count, 1);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  std::vector<Tensor> params{Tensor::scalar(0.0)};
  AdamState state(params, AdamConfig{0.1, 0.9, 0.98, 1e-9});
  std::vector<Tensor> grads{Tensor::scalar(1.0)};
  adam_step(params, grads, state);
  // m_hat = 1, v_hat = 1 after bias correction.
  EXPECT_NEAR(params[0][0], -0.1 / (1.0 + 1e-9), 1e-15);
}

TEST(Adam, ConvergesOnQuadratic) {
  std::vector<Tensor> params{Tensor::scalar(0.0)};
  AdamState state(params, AdamConfig{0.1, 0.9, 0.98, 1e-9});
  for (int step = 0; step < 200; ++step) {
    std::vector<Tensor> grads{Tensor::scalar(2.0 * (params[0][0] - 3.0))};
    adam_step(params, grads, state);
  }
  EXPECT_LT(std::abs(params[0][0] - 3.0), 0.1);
}

TEST(GradCheck, QuadraticIsNearlyExact) {
  ScalarFn f = [](Graph&, std::span<const Var> p) { return sum(mul(p[0], p[0])); };
  EXPECT_LT(grad_check(f, {random_tensor({4}, 1)}, 1e-5).max_rel_error, 1e-8);
}

TEST(GradCheck, ReluKinkNeedsJitter) {
  ScalarFn f = [](Graph&, std::span<const Var> p) { return sum(relu(p[0])); };
  const Tensor at_kink = Tensor::vector({0.0, 1.0, -1.0});
  EXPECT_GT(grad_check(f, {at_kink}, 1e-6).max_rel_error, 0.1);
  GradCheckOptions opt;
  opt.jitter = 1e-3;
  EXPECT_LT(grad_check(f, {at_kink}, 1e-6, opt).max_rel_error, 1e-8);
}

TEST(GradCheck, RejectsOutOfRangeEps) {
  ScalarFn f = [](Graph&, std::span<const Var> p) { return sum(p[0]); };
  EXPECT_THROW(grad_check(f, {Tensor({1})}, 1e-2), ConfigError);
  EXPECT_THROW(grad_check(f, {Tensor({1})}, 1e-9), ConfigError);
}
