#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <numbers>
#include <vector>

#include "stam/gradcheck.hpp"
#include "stam/graph.hpp"
#include "stam/ops.hpp"
#include "stam/rng.hpp"
#include "stam/tensor.hpp"

using namespace stam;

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Scalar probe sum(op(params) * r) with fixed random r, so every output
// entry contributes a distinct weight to the gradient.
using Op = std::function<Var(Graph<double>&, std::vector<Var>&)>;

double op_grad_error(std::vector<Tensor<double>*> params, const Op& op, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> weights;
  bool have_weights = false;
  auto loss = [&](Graph<double>& g) {
    std::vector<Var> vars;
    for (auto* p : params) vars.push_back(g.param(*p));
    Var y = op(g, vars);
    if (!have_weights) {
      weights = random_tensor(g.value(y).shape(), rng);
      have_weights = true;
    }
    return sum(g, mul(g, y, g.input(weights)));
  };
  return finite_difference_check<double>(loss, std::span<Tensor<double>* const>(params), 1e-6).max_rel_error;
}

}  // namespace

TEST(Tensor, ShapeAndDataLengthMustAgree) {
  EXPECT_THROW(Tensor<double>(Shape{2, 3}, std::vector<double>(5)), DimensionError);
  EXPECT_THROW(Tensor<double>(Shape{2, 0}), DimensionError);
  Tensor<double> t(Shape{2, 3}, 1.5);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.strides(), (Shape{3, 1}));
  EXPECT_FALSE(t.has_grad());
  t.grad()[4] = 2.0;
  EXPECT_TRUE(t.has_grad());
  EXPECT_EQ(t.grad().size(), t.numel());
}

TEST(Linear, IdentityWeightsReturnInput) {
  Graph<double> g;
  Var x = g.input(Tensor<double>(Shape{1, 2}, {1, 2}));
  Var w = g.input(Tensor<double>(Shape{2, 2}, {1, 0, 0, 1}));
  Var b = g.input(Tensor<double>(Shape{2}, {0, 0}));
  const auto& y = g.value(linear(g, x, w, b));
  EXPECT_EQ(y[0], 1.0);
  EXPECT_EQ(y[1], 2.0);
}

TEST(Linear, HandMatrixProduct) {
  Graph<double> g;
  Var x = g.input(Tensor<double>(Shape{2}, {1, 0}));
  Var w = g.input(Tensor<double>(Shape{2, 2}, {2, 3, 4, 5}));
  Var b = g.input(Tensor<double>(Shape{2}, {1, 1}));
  const auto& y = g.value(linear(g, x, w, b));
  EXPECT_EQ(y.shape(), Shape{2});
  EXPECT_EQ(y[0], 3.0);
  EXPECT_EQ(y[1], 5.0);
}

TEST(Linear, ShapeMismatchNamesBothShapes) {
  Graph<double> g;
  Var x = g.input(Tensor<double>(Shape{3, 4}));
  Var w = g.input(Tensor<double>(Shape{2, 5}));
  try {
    linear(g, x, w);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[3, 4]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2, 5]"), std::string::npos) << msg;
  }
}

TEST(Linear, GradientMatchesFiniteDifferences) {
  Rng rng(11);
  auto x = random_tensor({3, 4}, rng);
  auto w = random_tensor({5, 4}, rng);
  auto b = random_tensor({5}, rng);
  const double err = op_grad_error({&x, &w, &b}, [](Graph<double>& g, std::vector<Var>& v) {
    return linear(g, v[0], v[1], v[2]);
  }, 1);
  EXPECT_LT(err, 1e-6);
}

TEST(Softmax, UniformInputsGiveUniformRow) {
  for (double c : {-40.0, 0.0, 3.5, 1e3}) {
    Graph<double> g;
    const auto& y = g.value(softmax(g, g.input(Tensor<double>(Shape{3}, c))));
    for (double v : y.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  }
}

TEST(Softmax, ClosedFormTwoEntries) {
  Graph<double> g;
  const auto& y = g.value(softmax(g, g.input(Tensor<double>(Shape{2}, {0.0, std::log(2.0)}))));
  EXPECT_NEAR(y[0], 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(y[1], 2.0 / 3.0, 1e-15);
}

TEST(Softmax, ShiftInvariant) {
  Rng rng(2);
  auto v = random_tensor({4, 7}, rng, -5, 5);
  Tensor<double> shifted = v;
  for (auto& x : shifted.data()) x += 17.25;
  Graph<double> g;
  const auto& a = g.value(softmax(g, g.input(v)));
  const auto& b = g.value(softmax(g, g.input(shifted)));
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Softmax, RowsSumToOneOverWideRange) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t k = 1 + rng.index(40);
    auto v = random_tensor({5, k}, rng, -50, 50);
    Graph<double> g;
    const auto& y = g.value(softmax(g, g.input(v)));
    for (std::size_t r = 0; r < 5; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < k; ++j) {
        EXPECT_GE(y[r * k + j], 0.0);
        s += y[r * k + j];
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Softmax, GradientMatchesFiniteDifferences) {
  Rng rng(4);
  auto x = random_tensor({3, 5}, rng, -2, 2);
  EXPECT_LT(op_grad_error({&x}, [](Graph<double>& g, std::vector<Var>& v) { return softmax(g, v[0]); }, 2),
            1e-6);
}

TEST(LayerNorm, ConstantRowMapsToBeta) {
  Graph<double> g;
  Var x = g.input(Tensor<double>(Shape{1, 4}, 2.5));
  Var gamma = g.input(Tensor<double>(Shape{4}, 1.0));
  Var beta = g.input(Tensor<double>(Shape{4}, 0.0));
  for (double v : g.value(layer_norm(g, x, gamma, beta)).data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, SymmetricPairIsUnitNormalized) {
  Graph<double> g;
  Var x = g.input(Tensor<double>(Shape{2}, {1.0, -1.0}));
  Var gamma = g.input(Tensor<double>(Shape{2}, 1.0));
  Var beta = g.input(Tensor<double>(Shape{2}, 0.0));
  const auto& y = g.value(layer_norm(g, x, gamma, beta, 1e-6));
  EXPECT_NEAR(y[0], 1.0, 1e-5);
  EXPECT_NEAR(y[1], -1.0, 1e-5);
}

TEST(LayerNorm, BetaShiftsOutput) {
  Rng rng(5);
  auto x = random_tensor({3, 6}, rng);
  auto gamma = random_tensor({6}, rng);
  auto beta = random_tensor({6}, rng);
  Graph<double> g;
  const auto& with = g.value(layer_norm(g, g.input(x), g.input(gamma), g.input(beta)));
  const auto& without = g.value(layer_norm(g, g.input(x), g.input(gamma), g.input(Tensor<double>(Shape{6}))));
  for (std::size_t i = 0; i < with.numel(); ++i) EXPECT_NEAR(with[i] - without[i], beta[i % 6], 1e-14);
}

TEST(LayerNorm, NormalizesMeanAndVariance) {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor({4, 16}, rng, -3, 3);
    Graph<double> g;
    const auto& y = g.value(layer_norm(g, g.input(x), g.input(Tensor<double>(Shape{16}, 1.0)),
                                       g.input(Tensor<double>(Shape{16}, 0.0))));
    for (std::size_t r = 0; r < 4; ++r) {
      double mean = 0, var = 0;
      for (std::size_t j = 0; j < 16; ++j) mean += y[r * 16 + j] / 16;
      for (std::size_t j = 0; j < 16; ++j) var += (y[r * 16 + j] - mean) * (y[r * 16 + j] - mean) / 16;
      EXPECT_LE(std::abs(mean), 1e-6);
      EXPECT_NEAR(var, 1.0, 1e-4);
    }
  }
}

TEST(LayerNorm, LowVarianceRowsWithSmallEps) {
  Rng rng(16);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor({1, 16}, rng, -1, 1);
    double mean = 0, var = 0;
    for (double v : x.data()) mean += v / 16;
    for (double v : x.data()) var += (v - mean) * (v - mean) / 16;
    // Rescale to variance 1e-3 around an offset.
    for (auto& v : x.data()) v = 5.0 + (v - mean) * std::sqrt(1e-3 / var);
    Graph<double> g;
    const auto& y = g.value(layer_norm(g, g.input(x), g.input(Tensor<double>(Shape{16}, 1.0)),
                                       g.input(Tensor<double>(Shape{16}, 0.0)), 1e-8));
    double ym = 0, yv = 0;
    for (double v : y.data()) ym += v / 16;
    for (double v : y.data()) yv += (v - ym) * (v - ym) / 16;
    EXPECT_LE(std::abs(ym), 1e-6);
    EXPECT_NEAR(yv, 1.0, 1e-4);
  }
}

TEST(LayerNorm, GradientMatchesFiniteDifferences) {
  Rng rng(7);
  auto x = random_tensor({3, 5}, rng);
  auto gamma = random_tensor({5}, rng);
  auto beta = random_tensor({5}, rng);
  EXPECT_LT(op_grad_error({&x, &gamma, &beta},
                          [](Graph<double>& g, std::vector<Var>& v) { return layer_norm(g, v[0], v[1], v[2]); }, 3),
            1e-6);
}

TEST(Gelu, ReferenceValues) {
  Graph<double> g;
  const auto& y = g.value(gelu(g, g.input(Tensor<double>(Shape{3}, {0.0, 1.0, 10.0}))));
  EXPECT_EQ(y[0], 0.0);
  // Phi(1) from the standard normal table.
  EXPECT_NEAR(y[1], 0.841345, 1e-5);
  EXPECT_NEAR(y[2], 10.0, 1e-6);
}

TEST(Gelu, MonotoneOnTestedGrid) {
  std::vector<double> xs;
  for (int i = 0; i <= 400; ++i) xs.push_back(-0.75 + 0.01 * i);
  Graph<double> g;
  const auto& y = g.value(gelu(g, g.input(Tensor<double>(Shape{xs.size()}, xs))));
  for (std::size_t i = 1; i < xs.size(); ++i) EXPECT_GE(y[i], y[i - 1]);
}

TEST(Gelu, GradientMatchesFiniteDifferences) {
  Rng rng(8);
  auto x = random_tensor({4, 3}, rng, -3, 3);
  EXPECT_LT(op_grad_error({&x}, [](Graph<double>& g, std::vector<Var>& v) { return gelu(g, v[0]); }, 4), 1e-6);
}

TEST(CrossEntropy, UniformLogitsGiveLogC) {
  Graph<double> g;
  const std::vector<std::size_t> labels{2};
  Var loss = cross_entropy(g, g.input(Tensor<double>(Shape{1, 4}, 0.0)), labels);
  EXPECT_NEAR(g.value(loss).item(), std::log(4.0), 1e-12);
  EXPECT_NEAR(g.value(loss).item(), 1.386294, 1e-6);
}

TEST(CrossEntropy, ConfidentCorrectLogitIsNearZero) {
  Graph<double> g;
  const std::vector<std::size_t> labels{0};
  Var loss = cross_entropy(g, g.input(Tensor<double>(Shape{1, 4}, {20, 0, 0, 0})), labels);
  EXPECT_LT(g.value(loss).item(), 1e-6);
}

TEST(CrossEntropy, MatchesDirectFormula) {
  Rng rng(9);
  auto logits = random_tensor({2, 3}, rng, -2, 2);
  const std::vector<std::size_t> labels{2, 0};
  double expected = 0;
  for (std::size_t r = 0; r < 2; ++r) {
    double z = 0;
    for (std::size_t j = 0; j < 3; ++j) z += std::exp(logits[r * 3 + j]);
    expected += -(logits[r * 3 + labels[r]] - std::log(z)) / 2;
  }
  Graph<double> g;
  EXPECT_NEAR(g.value(cross_entropy(g, g.input(logits), labels)).item(), expected, 1e-10);
}

TEST(CrossEntropy, OutOfRangeLabelReportsIndex) {
  Graph<double> g;
  const std::vector<std::size_t> labels{1, 7};
  try {
    cross_entropy(g, g.input(Tensor<double>(Shape{2, 4})), labels);
    FAIL() << "expected LabelError";
  } catch (const LabelError& e) {
    EXPECT_EQ(e.index(), 1u);
  }
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  Rng rng(10);
  auto logits = random_tensor({3, 4}, rng, -2, 2);
  std::vector<Tensor<double>*> params{&logits};
  const std::vector<std::size_t> labels{3, 0, 1};
  auto loss = [&](Graph<double>& g) { return cross_entropy(g, g.param(logits), labels); };
  EXPECT_LT(finite_difference_check<double>(loss, std::span<Tensor<double>* const>(params), 1e-6).max_rel_error,
            1e-6);
}

TEST(Ops, StructuralOpsGradients) {
  Rng rng(12);
  auto x = random_tensor({2, 3, 4}, rng);
  auto tok = random_tensor({4}, rng);
  EXPECT_LT(op_grad_error({&x, &tok}, [](Graph<double>& g, std::vector<Var>& v) {
    return prepend_token(g, v[0], v[1]);
  }, 5), 1e-6);
  EXPECT_LT(op_grad_error({&x}, [](Graph<double>& g, std::vector<Var>& v) { return select_token(g, v[0], 2); }, 6),
            1e-6);
  EXPECT_LT(op_grad_error({&x}, [](Graph<double>& g, std::vector<Var>& v) { return mean_rows(g, v[0]); }, 7), 1e-6);
  EXPECT_LT(op_grad_error({&x, &x}, [](Graph<double>& g, std::vector<Var>& v) {
    return add(g, mul(g, v[0], v[1]), v[0]);
  }, 8), 1e-6);
  auto m = random_tensor({5, 3}, rng);
  EXPECT_LT(op_grad_error({&m}, [](Graph<double>& g, std::vector<Var>& v) { return slice_rows(g, v[0], 1, 4); }, 9),
            1e-6);
  EXPECT_LT(op_grad_error({&m, &tok}, [](Graph<double>& g, std::vector<Var>& v) {
    return stack(g, {reshape(g, v[0], Shape{15}), reshape(g, v[0], Shape{15})});
  }, 10), 1e-6);
}

TEST(GradCheck, SquareHasDerivativeSix) {
  Tensor<double> w(Shape{1}, 3.0);
  std::vector<Tensor<double>*> params{&w};
  auto loss = [&](Graph<double>& g) {
    Var x = g.param(w);
    return sum(g, mul(g, x, x));
  };
  const auto r = finite_difference_check<double>(loss, std::span<Tensor<double>* const>(params), 1e-4);
  EXPECT_NEAR(r.worst_analytic, 6.0, 1e-12);
  EXPECT_NEAR(r.worst_numeric, 6.0, 1e-6);
}

TEST(GradCheck, OneLayerModelAgreesToHighPrecision) {
  Rng rng(13);
  auto x = random_tensor({4, 6}, rng);
  auto w = random_tensor({3, 6}, rng);
  auto b = random_tensor({3}, rng);
  std::vector<Tensor<double>*> params{&w, &b};
  const std::vector<std::size_t> labels{0, 2, 1, 2};
  auto loss = [&](Graph<double>& g) { return cross_entropy(g, linear(g, g.input(x), g.param(w), g.param(b)), labels); };
  EXPECT_LT(finite_difference_check<double>(loss, std::span<Tensor<double>* const>(params), 1e-5).max_rel_error,
            1e-7);
}

TEST(GradCheck, RejectsNonScalarLossAndBadStep) {
  Tensor<double> w(Shape{2}, 1.0);
  std::vector<Tensor<double>*> params{&w};
  auto vector_loss = [&](Graph<double>& g) { return g.param(w); };
  EXPECT_THROW(finite_difference_check<double>(vector_loss, std::span<Tensor<double>* const>(params), 1e-5),
               ContractError);
  auto loss = [&](Graph<double>& g) { return sum(g, g.param(w)); };
  EXPECT_THROW(finite_difference_check<double>(loss, std::span<Tensor<double>* const>(params), 0.0), ContractError);
}

TEST(Graph, SecondBackwardIsRejected) {
  Tensor<double> w(Shape{2}, 1.0);
  Graph<double> g;
  Var loss = sum(g, g.param(w));
  g.backward(loss);
  EXPECT_THROW(g.backward(loss), GraphError);
}

TEST(Graph, ParameterGradientsAccumulate) {
  Tensor<double> w(Shape{2}, {1.0, 2.0});
  for (int i = 0; i < 2; ++i) {
    Graph<double> g;
    g.backward(sum(g, g.param(w)));
  }
  EXPECT_EQ(w.grad()[0], 2.0);
  w.zero_grad();
  EXPECT_EQ(w.grad()[1], 0.0);
}

TEST(Graph, RepeatedForwardIsBitIdentical) {
  Rng rng(14);
  auto x = random_tensor({3, 8}, rng);
  auto w = random_tensor({8, 8}, rng);
  auto run = [&] {
    Graph<double> g;
    Var h = gelu(g, linear(g, g.input(x), g.input(w)));
    return g.value(softmax(g, h));
  };
  EXPECT_EQ(run(), run());
}

TEST(Rng, DerivedStreamsDifferAndRepeat) {
  EXPECT_EQ(derive_seed(5, 1), derive_seed(5, 1));
  EXPECT_NE(derive_seed(5, 1), derive_seed(5, 2));
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  Rng c(1);
  for (int i = 0; i < 1000; ++i) {
    const std::size_t k = c.index(7);
    EXPECT_LT(k, 7u);
    const double u = c.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
  }
}
