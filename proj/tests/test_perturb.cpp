#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "apa/perturb.hpp"

using namespace apa;

namespace {

struct Instance {
  ActivationRecord act;
  LinearClassifier clf;
};

Instance random_instance(std::size_t n, std::size_t d, std::size_t C,
                         double z_scale, double T, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> N(0.0, 1.0);
  Tensor z({n, d});
  for (double& v : z.values()) v = std::abs(N(rng)) * z_scale / std::sqrt(double(d));
  Instance inst{make_activation_record(z), {}};
  inst.clf.weight = Tensor({C, d});
  for (double& v : inst.clf.weight.values()) v = N(rng) / std::sqrt(double(d));
  inst.clf.bias = Tensor({C});
  for (double& v : inst.clf.bias.values()) v = 0.1 * N(rng);
  inst.clf.temperature = T;
  return inst;
}

double max_abs(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Inner objective of a single 2-d sample at r = eps (cos t, sin t).
double circle_kl(const Instance& inst, Variant v, double eps, double t) {
  Tensor r = Tensor::matrix(1, 2, {eps * std::cos(t), eps * std::sin(t)});
  return inner_objective(inst.act, inst.clf, r, v)[0];
}

/// 1-degree grid over the circle, refined by golden-section search on the
/// best cell's neighbourhood.
double grid_search_kl(const Instance& inst, Variant v, double eps) {
  const double step = std::numbers::pi / 180.0;
  double best_t = 0.0, best = -1.0;
  for (int k = 0; k < 360; ++k) {
    const double val = circle_kl(inst, v, eps, k * step);
    if (val > best) {
      best = val;
      best_t = k * step;
    }
  }
  double lo = best_t - step, hi = best_t + step;
  const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
  for (int it = 0; it < 100; ++it) {
    const double a = hi - phi * (hi - lo), b = lo + phi * (hi - lo);
    if (circle_kl(inst, v, eps, a) > circle_kl(inst, v, eps, b)) hi = b;
    else lo = a;
  }
  return std::max(best, circle_kl(inst, v, eps, 0.5 * (lo + hi)));
}

}  // namespace

TEST(Projection, Examples) {
  Tensor zn = Tensor::matrix(1, 2, {1, 0});
  EXPECT_EQ(project_perturbation(zn, Tensor::matrix(1, 2, {-1, 1})),
            Tensor::matrix(1, 2, {-1, 1}));
  EXPECT_EQ(project_perturbation(zn, Tensor::matrix(1, 2, {1, 0})),
            Tensor::matrix(1, 2, {0, 0}));
  EXPECT_EQ(project_perturbation(zn, Tensor::matrix(1, 2, {0, 0})),
            Tensor::matrix(1, 2, {0, 0}));
  EXPECT_THROW(project_perturbation(zn, Tensor::matrix(1, 2, {-1, 0})), DegenerateInput);
}

TEST(Projection, UnitNormAndIdempotent) {
  Instance inst = random_instance(50, 7, 3, 2.0, 0.05, 1);
  std::mt19937_64 rng(2);
  std::normal_distribution<double> N(0.0, 1.0);
  Tensor r(inst.act.z.shape());
  for (double& v : r.values()) v = N(rng);
  Tensor p1 = project_perturbation(inst.act.z_norm, r);
  Tensor p2 = project_perturbation(inst.act.z_norm, p1);
  for (std::size_t i = 0; i < r.rows(); ++i) {
    Tensor s = row_of(inst.act.z_norm, i) + row_of(p1, i);
    EXPECT_NEAR(norm2(s), 1.0, 1e-9);
  }
  for (std::size_t k = 0; k < p1.size(); ++k) EXPECT_NEAR(p1[k], p2[k], 1e-12);
}

TEST(Approx, SymmetricBoundaryCaseHasPositiveKlAtFullBudget) {
  Instance inst;
  inst.act = make_activation_record(Tensor::matrix(1, 2, {0.0, 2.0}));
  inst.clf.weight = Tensor::matrix(2, 2, {1, 0, -1, 0});
  inst.clf.bias = Tensor({2});
  inst.clf.temperature = 0.05;
  const PerturbParams params{0.5, 0.1, 3};
  Perturbation p = approx_perturbation(inst.act, inst.clf, params, Variant::u);
  EXPECT_NEAR(norm2(p.r), 0.5, 1e-12);
  EXPECT_TRUE(p.within_budget());
  EXPECT_GT(loss_pu(inst.act, inst.clf, p.r)[0], 0.0);
}

TEST(Approx, VanishingBudgetGivesVanishingLoss) {
  Instance inst = random_instance(4, 6, 3, 3.0, 0.05, 5);
  double prev = HUGE_VAL;
  for (double eps : {1e-1, 1e-3, 1e-5, 1e-7}) {
    Perturbation p = approx_perturbation(inst.act, inst.clf, {eps, 1e-3, 0}, Variant::u);
    const auto kl = loss_pu(inst.act, inst.clf, p.r);
    double total = 0.0;
    for (double v : kl) total += v;
    EXPECT_LT(total, prev);
    prev = total;
  }
  EXPECT_LT(prev, 1e-9);
}

TEST(Approx, NormalizedVariantStaysOnSphere) {
  Instance inst = random_instance(30, 16, 4, 3.0, 0.05, 6);
  Perturbation p = approx_perturbation(inst.act, inst.clf, default_params(Variant::n, 1),
                                       Variant::n);
  EXPECT_TRUE(p.projected);
  for (std::size_t i = 0; i < 30; ++i) {
    Tensor s = row_of(inst.act.z_norm, i) + row_of(p.r, i);
    EXPECT_NEAR(norm2(s), 1.0, 1e-9);
  }
}

TEST(Approx, SeededAndPerSample) {
  Instance inst = random_instance(8, 5, 3, 3.0, 0.05, 7);
  const PerturbParams params{1.0, 1.0, 42};
  const std::vector<std::uint64_t> ids = {10, 11, 12, 13, 14, 15, 16, 17};
  Perturbation a = approx_perturbation(inst.act, inst.clf, params, Variant::u, ids, 3);
  Perturbation b = approx_perturbation(inst.act, inst.clf, params, Variant::u, ids, 3);
  EXPECT_EQ(a.r, b.r);
  // A sample's perturbation depends only on its own id, not on its position.
  Instance one{make_activation_record(row_of(inst.act.z, 2)), inst.clf};
  const std::vector<std::uint64_t> id2 = {12};
  Perturbation c = approx_perturbation(one.act, one.clf, params, Variant::u, id2, 3);
  for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(c.r[k], a.r.at(2, k), 1e-12);
}

TEST(Approx, ZeroGradientEverywhereFailsAfterRetries) {
  Instance inst = random_instance(2, 3, 2, 1.0, 0.05, 8);
  inst.clf.weight.fill(0.0);
  EXPECT_THROW(approx_perturbation(inst.act, inst.clf, {1.0, 1.0, 0}, Variant::u),
               PerturbationFailure);
}

TEST(InnerGradient, GraphRouteMatchesClosedForm) {
  Instance inst = random_instance(5, 6, 4, 2.0, 0.1, 9);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> N(0.0, 0.3);
  Tensor r(inst.act.z.shape());
  for (double& v : r.values()) v = N(rng);
  const Tensor logp = clean_log_probs(inst.act, inst.clf);
  const Tensor g = inner_gradient(inst.act.z, logp, inst.clf, r);
  for (std::size_t i = 0; i < 5; ++i) {
    std::vector<double> p(4), grad(6);
    for (std::size_t k = 0; k < 4; ++k) p[k] = std::exp(logp.at(i, k));
    detail::ClosedForm obj{&inst.clf, inst.act.z.row(i), p};
    obj.value(r.row(i), grad);
    for (std::size_t c = 0; c < 6; ++c) EXPECT_NEAR(grad[c], g.at(i, c), 1e-10);
  }
}

TEST(Oracle, ZeroBudget) {
  Instance inst = random_instance(3, 4, 3, 2.0, 0.05, 10);
  Perturbation p = oracle_perturbation(inst.act, inst.clf, 0.0, Variant::u);
  for (double v : p.r.values()) EXPECT_EQ(v, 0.0);
  for (double kl : loss_pu(inst.act, inst.clf, p.r)) EXPECT_NEAR(kl, 0.0, 1e-15);
}

TEST(Oracle, DominatesApproximation) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    Instance inst = random_instance(4, 6, 4, 3.0, 0.05, 100 + s);
    for (Variant v : {Variant::u, Variant::n}) {
      const PerturbParams params = default_params(v, s);
      const double eps = v == Variant::u ? 1.0 : params.epsilon;
      Perturbation a = approx_perturbation(inst.act, inst.clf, {eps, params.xi, s}, v);
      Perturbation o = oracle_perturbation(inst.act, inst.clf, eps, v);
      // Both sides measured with the inner objective of their variant.
      auto objective = [&](const Perturbation& p) {
        if (v == Variant::u) return inner_objective(inst.act, inst.clf, p.r, v);
        return loss_pn(inst.act, inst.clf, p.r);
      };
      const auto ka = objective(a), ko = objective(o);
      for (std::size_t i = 0; i < ka.size(); ++i) EXPECT_GE(ko[i], ka[i] - 1e-9);
    }
  }
}

TEST(Oracle, MatchesGridSearchInTwoDimensions) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    Instance inst = random_instance(1, 2, 2, 2.0, 0.05, 200 + s);
    for (double eps : {0.3, 1.0, 3.0}) {
      Perturbation o = oracle_perturbation(inst.act, inst.clf, eps, Variant::u);
      const double ko = inner_objective(inst.act, inst.clf, o.r, Variant::u)[0];
      const double kg = grid_search_kl(inst, Variant::u, eps);
      EXPECT_NEAR(ko, kg, 1e-6) << "seed " << s << " eps " << eps;
    }
  }
}

TEST(Mapping, NormUnnormExamples) {
  ActivationRecord act = make_activation_record(Tensor::matrix(1, 2, {30, 0}));
  Perturbation rn{Tensor::matrix(1, 2, {0.1, 0}), 1.0, Space::penult_normalized};
  Perturbation ru = map_norm_unnorm(rn, act, MapDirection::n_to_u);
  EXPECT_NEAR(ru.r[0], 3.0, 1e-12);
  EXPECT_EQ(ru.r[1], 0.0);
  Perturbation zero_u{Tensor({1, 2}), 1.0, Space::penult_unnormalized};
  Perturbation zn = map_norm_unnorm(zero_u, act, MapDirection::u_to_n);
  for (double v : zn.r.values()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(map_norm_unnorm(zero_u, act, MapDirection::n_to_u), std::invalid_argument);
}

TEST(Mapping, LossIdentitiesBetweenSpaces) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    Instance inst = random_instance(6, 8, 5, 5.0, 0.05, 300 + s);
    Perturbation rn = approx_perturbation(inst.act, inst.clf, {1.0, 1.0, s}, Variant::n);
    Perturbation n2u = map_norm_unnorm(rn, inst.act, MapDirection::n_to_u);
    EXPECT_LT(max_abs(loss_pu(inst.act, inst.clf, n2u.r), loss_pn(inst.act, inst.clf, rn.r)),
              1e-10);
    Perturbation ru = approx_perturbation(inst.act, inst.clf, {3.0, 1.0, s}, Variant::u);
    Perturbation u2n = map_norm_unnorm(ru, inst.act, MapDirection::u_to_n);
    EXPECT_LT(max_abs(loss_pn(inst.act, inst.clf, u2n.r), loss_pu(inst.act, inst.clf, ru.r)),
              1e-10);
  }
}

TEST(Mapping, IntermediateToPenultimate) {
  Model m = Model::initialize({}, 4, 0.05);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> N(0.0, 1.0);
  Tensor x({5, 8});
  for (double& v : x.values()) v = N(rng);
  // Identity f^b: split at the last boundary.
  {
    const std::size_t split = m.features.depth();
    Tensor r({5, 16});
    for (double& v : r.values()) v = 0.1 * N(rng);
    Perturbation ri{r, 1.0, Space::intermediate, split};
    Perturbation rp = map_intermediate_to_penult(m, x, ri);
    for (std::size_t k = 0; k < r.size(); ++k) EXPECT_NEAR(rp.r[k], r[k], 1e-12);
  }
  // r_i = 0 maps to 0.
  {
    Perturbation ri{Tensor({5, 32}), 1.0, Space::intermediate, 1};
    Perturbation rp = map_intermediate_to_penult(m, x, ri);
    for (double v : rp.r.values()) EXPECT_EQ(v, 0.0);
  }
}

TEST(TopK, FullKAlignsWithApproximation) {
  Instance inst = random_instance(20, 8, 4, 3.0, 0.05, 11);
  const double eps = 1.0;
  Perturbation full = oracle_perturbation(inst.act, inst.clf, eps, Variant::n);
  double total = 0.0;
  for (std::size_t k = 1; k <= 4; ++k) {
    Perturbation rk = topk_perturbation(inst.act, inst.clf, eps, k, Variant::n);
    double mean_cos = 0.0;
    for (std::size_t i = 0; i < 20; ++i) mean_cos += cosine(full.r.row(i), rk.r.row(i));
    mean_cos /= 20.0;
    EXPECT_GT(mean_cos, 0.0) << "k = " << k;
    total += mean_cos;
  }
  EXPECT_GT(total, 0.0);
}

TEST(TopK, DominantClassTermOnly) {
  Instance inst = random_instance(1, 4, 3, 3.0, 0.01, 12);
  Perturbation r1 = topk_perturbation(inst.act, inst.clf, 0.5, 1, Variant::u);
  Perturbation r3 = topk_perturbation(inst.act, inst.clf, 0.5, 3, Variant::u);
  const Tensor lp = clean_log_probs(inst.act, inst.clf);
  double pmax = 0.0;
  for (double v : lp.values()) pmax = std::max(pmax, std::exp(v));
  ASSERT_GT(pmax, 0.99);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(r1.r[c], r3.r[c], 0.02);
  EXPECT_THROW(topk_perturbation(inst.act, inst.clf, 0.5, 4, Variant::u),
               std::invalid_argument);
}

TEST(TopK, RankingBreaksTiesByClassIndex) {
  const std::vector<double> p = {0.2, 0.4, 0.2, 0.2};
  EXPECT_EQ(ranked_classes(p), (std::vector<std::size_t>{1, 0, 2, 3}));
}

TEST(Compensation, Examples) {
  ActivationRecord act = make_activation_record(Tensor::matrix(1, 2, {3, 4}));
  EXPECT_DOUBLE_EQ(norm_compensation(act, Tensor::matrix(1, 2, {3, 4}))[0], 2.0);
  EXPECT_DOUBLE_EQ(norm_compensation(act, Tensor::matrix(1, 2, {0, 0}))[0], 1.0);
  EXPECT_GT(norm_compensation(act, Tensor::matrix(1, 2, {-3, -4.0000001}))[0], 0.0);
}
