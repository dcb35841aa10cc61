#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "apa/autodiff.hpp"
#include "apa/gradcheck.hpp"

using namespace apa;
using namespace apa::ad;

namespace {

Tensor random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(s));
  for (double& v : t.values()) v = u(rng);
  return t;
}

}  // namespace

TEST(Tensor, ShapeAndRowView) {
  Tensor m = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(m.rows(), 2u);
  EXPECT_EQ(m.cols(), 3u);
  EXPECT_DOUBLE_EQ(m.at(1, 2), 6.0);
  EXPECT_EQ(m.row(1)[0], 4.0);
  Tensor v = Tensor::vector({1, 2});
  EXPECT_EQ(v.rows(), 1u);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1.0}), DimensionMismatch);
}

TEST(Tensor, CosineGuardsZeroVectors) {
  std::vector<double> a{1, 0}, z{0, 0};
  EXPECT_TRUE(std::isnan(cosine(a, z)));
  EXPECT_DOUBLE_EQ(cosine(a, a), 1.0);
  EXPECT_THROW(normalized(z), DegenerateInput);
}

TEST(Autodiff, AddMulChainRule) {
  Graph g;
  Var a = g.leaf(Tensor::vector({1, 2}));
  Var b = g.leaf(Tensor::vector({3, 4}));
  Var y = sum(mul(add(a, b), a));
  EXPECT_DOUBLE_EQ(y.value()[0], 4.0 * 1.0 + 6.0 * 2.0);
  g.backward(y);
  // d/da (a+b)a = 2a + b; d/db = a
  EXPECT_DOUBLE_EQ(g.grad(a)[0], 5.0);
  EXPECT_DOUBLE_EQ(g.grad(a)[1], 8.0);
  EXPECT_DOUBLE_EQ(g.grad(b)[1], 2.0);
}

TEST(Autodiff, ReluSubgradientAtZeroIsZero) {
  Graph g;
  Var a = g.leaf(Tensor::vector({-1.0, 0.0, 2.0}));
  g.backward(sum(relu(a)));
  EXPECT_EQ(g.grad(a), Tensor::vector({0.0, 0.0, 1.0}));
}

TEST(Autodiff, ConstantsReceiveNoGradient) {
  Graph g;
  Var a = g.leaf(Tensor::vector({1.0, 2.0}));
  Var c = g.constant(Tensor::vector({5.0, 5.0}));
  g.backward(sum(mul(a, c)));
  EXPECT_FALSE(g.requires_grad(c));
  EXPECT_EQ(g.grad(c), Tensor::vector({0.0, 0.0}));
}

TEST(Autodiff, BackwardRequiresScalar) {
  Graph g;
  Var a = g.leaf(Tensor::vector({1.0, 2.0}));
  EXPECT_THROW(g.backward(a), DimensionMismatch);
}

TEST(Autodiff, SoftmaxIsStableForLargeLogits) {
  Graph g;
  Var a = g.constant(Tensor::vector({1000.0, 0.0}));
  Tensor p = softmax_rows(a, 1.0).value();
  EXPECT_DOUBLE_EQ(p[0], 1.0);
  EXPECT_EQ(p[1], 0.0);
  Tensor lp = log_softmax_rows(a, 1.0).value();
  EXPECT_NEAR(lp[1], -1000.0, 1e-9);
  EXPECT_THROW(softmax_rows(a, 0.0), std::invalid_argument);
}

TEST(Autodiff, KlOfIdenticalDistributionsIsZero) {
  Graph g;
  Var p = g.constant(Tensor::vector({0.2, 0.3, 0.5}));
  EXPECT_NEAR(kl_divergence(p, p).value()[0], 0.0, 1e-15);
  Var q = g.constant(Tensor::vector({0.0, 0.5, 0.5}));
  EXPECT_THROW(kl_divergence(p, q), DegenerateInput);
  // 0 log 0 = 0
  EXPECT_TRUE(std::isfinite(kl_divergence(q, p).value()[0]));
}

TEST(Autodiff, NormalizeZeroRowThrows) {
  Graph g;
  Var a = g.leaf(Tensor::matrix(2, 2, {1, 1, 0, 0}));
  EXPECT_THROW(normalize_rows(a), DegenerateInput);
}

TEST(Autodiff, NormalizeJacobianAnnihilatesInput) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor v = random_tensor({6}, rng, -3, 3);
    // J v via J^T applied to upstream = v: J is symmetric.
    Graph g;
    Var x = g.leaf(v);
    Var y = normalize_rows(x);
    g.backward(sum(mul(y, g.constant(v))));
    const Tensor gx = g.grad(x);
    for (double gi : gx.values()) EXPECT_NEAR(gi, 0.0, 1e-12);
  }
}

TEST(Autodiff, StandardizeColumnsMatchesMoments) {
  Graph g;
  Var a = g.leaf(Tensor::matrix(3, 1, {1, 2, 6}));
  Tensor s = standardize_cols(a, 0.0).value();
  const double mean = 3.0, var = (4.0 + 1.0 + 9.0) / 3.0;
  EXPECT_NEAR(s[2], (6 - mean) / std::sqrt(var), 1e-14);
}

TEST(GradCheck, Primitives) {
  std::mt19937_64 rng(11);
  const std::vector<std::pair<const char*, ScalarFn>> cases = {
      {"add", [](Graph&, Var x) { return sum(mul(add(x, x), x)); }},
      {"sub", [](Graph& g, Var x) { return sum(mul(sub(x, g.constant(Tensor({5, 4}, 0.3))), x)); }},
      {"scale", [](Graph&, Var x) { return sum(mul(scale(x, -2.5), x)); }},
      {"relu", [](Graph&, Var x) { return sum(mul(relu(x), x)); }},
      {"exp", [](Graph&, Var x) { return mean(exp(x)); }},
      {"log", [](Graph&, Var x) { return sum(log(exp(x))); }},
      {"row_sum", [](Graph&, Var x) { return sum(mul(row_sum(x), row_sum(x))); }},
      {"col_mean", [](Graph&, Var x) { return sum(mul(col_mean(x), col_mean(x))); }},
      {"pick", [](Graph&, Var x) { return sum(exp(pick(x, {0, 3, 1, 2, 0}))); }},
      {"linear", [](Graph& g, Var x) {
         Tensor w = Tensor::matrix(2, 4, {0.1, -0.2, 0.3, 0.4, 0.5, -0.6, 0.7, 0.8});
         Var y = linear(x, g.constant(w));
         return sum(mul(y, y));
       }},
      {"add_row", [](Graph& g, Var x) {
         Var y = add_row(x, g.constant(Tensor::vector({1, 2, 3, 4})));
         return sum(mul(y, y));
       }},
      {"mul_row", [](Graph& g, Var x) {
         Var y = mul_row(x, g.constant(Tensor::vector({1, -2, 3, 0.5})));
         return sum(mul(y, x));
       }},
      {"scale_rows", [](Graph& g, Var x) {
         Var y = scale_rows(x, g.constant(Tensor::vector({0.5, 2.0, -1.0, 1.5, 0.25})));
         return sum(mul(y, x));
       }},
      {"normalize_rows", [](Graph& g, Var x) {
         Var y = normalize_rows(x);
         return sum(mul(y, g.constant(Tensor({5, 4}, 0.7))));
       }},
      {"log_softmax", [](Graph&, Var x) {
         return sum(pick(log_softmax_rows(x, 0.5), {1, 2, 3, 0, 1}));
       }},
      {"softmax", [](Graph& g, Var x) {
         Tensor w({5, 4});
         for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::sin(1.0 + i);
         return sum(mul(softmax_rows(x, 0.3), g.constant(w)));
       }},
      {"kl_rows_q", [](Graph& g, Var x) {
         Var p = g.constant(Tensor({5, 4}, 0.25));
         return sum(kl_rows(p, softmax_rows(x, 1.0)));
       }},
      {"kl_rows_p", [](Graph& g, Var x) {
         Var q = g.constant(Tensor({5, 4}, 0.25));
         return sum(kl_rows(softmax_rows(x, 1.0), q));
       }},
      {"kl_log_probs", [](Graph& g, Var x) {
         Var lp = log_softmax_rows(x, 0.8);
         Var lq = log_softmax_rows(scale(x, -0.5), 0.8);
         (void)g;
         return sum(kl_from_log_probs(lp, lq));
       }},
      {"standardize", [](Graph& g, Var x) {
         Var y = standardize_cols(x, 1e-5);
         return sum(mul(y, g.constant(Tensor::matrix(5, 4, {1, 2, 3, 4, -1, 0.5, 2, 1, 3, -2, 1, 0, 0.5, 1, -1, 2, 2, -1, 0, 1}))));
       }},
  };
  for (const auto& [name, fn] : cases) {
    for (int k = 0; k < 20; ++k) {
      Tensor x = random_tensor({5, 4}, rng, 0.1, 1.5);
      auto res = finite_diff_check(fn, x, 1e-5);
      EXPECT_LT(res.max_rel_error, 1e-5) << name << " point " << k;
    }
  }
}
