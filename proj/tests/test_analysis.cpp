#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "apa/analysis.hpp"

using namespace apa;

namespace {

/// Hand-written gradient of KL(p || softmax(W v + b)/T) in v:
/// W^T (q - p) / T.
std::vector<double> head_grad_in_v(const LinearClassifier& clf, std::span<const double> v,
                                   std::span<const double> log_p) {
  const std::size_t C = clf.classes(), d = v.size();
  std::vector<double> logit(C);
  double mx = -INFINITY;
  for (std::size_t c = 0; c < C; ++c) {
    logit[c] = clf.bias[c];
    for (std::size_t k = 0; k < d; ++k) logit[c] += clf.weight.at(c, k) * v[k];
    logit[c] /= clf.temperature;
    mx = std::max(mx, logit[c]);
  }
  double z = 0.0;
  for (double l : logit) z += std::exp(l - mx);
  std::vector<double> g(d, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    const double q = std::exp(logit[c] - mx) / z;
    const double diff = (q - std::exp(log_p[c])) / clf.temperature;
    for (std::size_t k = 0; k < d; ++k) g[k] += clf.weight.at(c, k) * diff;
  }
  return g;
}

LinearClassifier random_head(std::size_t C, std::size_t d, std::uint64_t seed, double T) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  LinearClassifier h;
  h.weight = Tensor({C, d});
  h.bias = Tensor({C});
  for (double& v : h.weight.values()) v = nd(rng);
  for (double& v : h.bias.values()) v = 0.1 * nd(rng);
  h.temperature = T;
  return h;
}

}  // namespace

TEST(Cosine, ZeroRowsAreExcludedAndCounted) {
  const Tensor a = Tensor::matrix(3, 2, {1, 0, 0, 0, 1, 1});
  const Tensor b = Tensor::matrix(3, 2, {1, 0, 1, 1, -1, -1});
  const CosineStat s = mean_row_cosine(a, b);
  EXPECT_EQ(s.used, 2u);
  EXPECT_EQ(s.excluded, 1u);
  EXPECT_NEAR(s.mean, 0.0, 1e-15);
  EXPECT_TRUE(std::isnan(mean_row_cosine(Tensor({1, 2}), Tensor({1, 2})).mean));
}

TEST(Shrink, OrthogonalHeadGivesUnitRatio) {
  // z + r lies on e1 and every head row has a zero first coordinate.
  LinearClassifier h;
  h.weight = Tensor::matrix(3, 4, {0, 1, 2, -1, 0, -2, 0.5, 1, 0, 0.3, -1, 2});
  h.bias = Tensor::vector({0.1, -0.2, 0.3});
  h.temperature = 0.5;
  const Tensor z = Tensor::matrix(2, 4, {3, 3, 0, 0, 1, -2, 4, 0.5});
  const Tensor r = Tensor::matrix(2, 4, {2, -3, 0, 0, 6, 2, -4, -0.5});
  const auto s = shrink_samples(make_activation_record(z), h, r);
  ASSERT_EQ(s.size(), 2u);
  for (const ShrinkSample& x : s) {
    ASSERT_GT(x.grad_n_norm, 0.0);
    EXPECT_NEAR(x.ratio(), 1.0, 1e-8);
  }
  EXPECT_NEAR(s[0].perturbed_norm, 5.0, 1e-15);
  EXPECT_NEAR(s[1].perturbed_norm, 7.0, 1e-15);
}

TEST(Shrink, RatioIsSineOfHeadGradientAngle) {
  const LinearClassifier h = random_head(5, 6, 4, 0.1);
  std::mt19937_64 rng(9);
  std::normal_distribution<double> nd;
  Tensor z({20, 6}), r({20, 6});
  for (double& v : z.values()) v = 3.0 * nd(rng);
  for (double& v : r.values()) v = 20.0 * nd(rng);
  const ActivationRecord act = make_activation_record(z);
  const Tensor logp = clean_log_probs(act, h);
  const auto s = shrink_samples(act, h, r);
  for (std::size_t i = 0; i < s.size(); ++i) {
    std::vector<double> v(6);
    for (std::size_t k = 0; k < 6; ++k) v[k] = z.at(i, k) + r.at(i, k);
    const std::vector<double> u = normalized(v);
    const std::vector<double> g = head_grad_in_v(h, u, logp.row(i));
    const double c = cosine(g, u);
    const double sine = std::sqrt(std::max(0.0, 1.0 - c * c));
    EXPECT_NEAR(s[i].ratio(), sine, 1e-9) << i;
    EXPECT_LE(s[i].ratio(), 1.0 + 1e-12);
    EXPECT_NEAR(s[i].grad_n_norm, norm2(g), 1e-9 * norm2(g));
  }
}

TEST(Shrink, TableShrinksWithEpsilon) {
  TaskSpec t;
  t.samples = 200;
  auto [src, tgt] = generate_task(t);
  AdaptConfig cfg;
  cfg.source_steps = 300;
  const SourceResult s = run_source_stage(cfg, src);
  const auto rows = probe_shrinking(s.model, tgt.x, {1, 3, 10, 30, 100}, 10.0, 1);
  ASSERT_EQ(rows.size(), 5u);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_GT(rows[i].used, 0u);
    EXPECT_LE(rows[i].max_ratio, 1.0 + 1e-12);
    if (i > 0) {
      EXPECT_GT(rows[i].mean_perturbed_norm, rows[i - 1].mean_perturbed_norm);
    }
  }
  // ||grad_u|| / ||grad_n|| = ratio / ||z + r|| falls once eps dominates ||z||.
  EXPECT_LT(rows.back().mean_grad_ratio, rows.front().mean_grad_ratio);
}

TEST(Probe, HeadGradientMatchesFiniteDifference) {
  const LinearClassifier h = random_head(4, 5, 2, 0.2);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> nd;
  Tensor z({3, 5}), r({3, 5});
  for (double& v : z.values()) v = nd(rng);
  for (double& v : r.values()) v = 0.5 * nd(rng);
  const ActivationRecord act = make_activation_record(z);
  const Tensor logp = clean_log_probs(act, h);
  Model m;
  m.head = h;
  const Tensor g = detail::head_gradient(m, z, r, true, logp);
  auto loss = [&](const Tensor& zz) {
    double total = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
      std::vector<double> v(5);
      for (std::size_t k = 0; k < 5; ++k) v[k] = zz.at(i, k) + r.at(i, k);
      const auto u = normalized(v);
      double lse_max = -INFINITY;
      std::vector<double> l(4);
      for (std::size_t c = 0; c < 4; ++c) {
        l[c] = h.bias[c];
        for (std::size_t k = 0; k < 5; ++k) l[c] += h.weight.at(c, k) * u[k];
        l[c] /= h.temperature;
        lse_max = std::max(lse_max, l[c]);
      }
      double se = 0.0;
      for (double x : l) se += std::exp(x - lse_max);
      for (std::size_t c = 0; c < 4; ++c) {
        const double lq = l[c] - lse_max - std::log(se);
        total += std::exp(logp.at(i, c)) * (logp.at(i, c) - lq);
      }
    }
    return total / 3.0;
  };
  for (std::size_t j = 0; j < z.size(); ++j) {
    Tensor a = z, b = z;
    a[j] += 1e-6;
    b[j] -= 1e-6;
    EXPECT_NEAR(g[j], (loss(a) - loss(b)) / 2e-6, 1e-6) << j;
  }
}

TEST(Probe, LeavesModelUntouchedAndReportsAllPairs) {
  TaskSpec t;
  t.samples = 200;
  auto [src, tgt] = generate_task(t);
  AdaptConfig cfg;
  cfg.source_steps = 300;
  const SourceResult s = run_source_stage(cfg, src);
  const std::uint64_t before = parameter_hash(s.model);
  const Tensor x = probe_batch(tgt, 64, 3);
  const ProbeSample p = probe_correlations(s.model, x, 7, {});
  EXPECT_EQ(parameter_hash(s.model), before);
  ASSERT_FALSE(p.skipped) << p.reason;
  EXPECT_EQ(p.step, 7u);
  for (const char* k : {"r_u", "r_n", "grad_u", "grad_n", "delta_u", "delta_n", "delta_i",
                        "topk_1", "topk_4"})
    EXPECT_TRUE(p.vectors.count(k)) << k;
  const std::size_t nv = p.vectors.size();
  EXPECT_EQ(p.cosines.size(), nv * (nv - 1) / 2);
  for (const auto& [k, c] : p.cosines) {
    EXPECT_EQ(c.used + c.excluded, 64u) << k;
    if (c.used) {
      EXPECT_GE(c.mean, -1.0 - 1e-12) << k;
      EXPECT_LE(c.mean, 1.0 + 1e-12) << k;
    }
  }
  // r_n is the projected ascent direction of the same loss whose gradient is
  // grad_n, so the two point the same way on average.
  EXPECT_GT(p.cosines.at("grad_n:r_n").mean, 0.0);
  const auto metrics = probe_metrics(p);
  EXPECT_EQ(metrics.at("probe_skipped"), 0.0);
  EXPECT_TRUE(metrics.count("cos:delta_n:r_n"));
}

TEST(Probe, ZeroStepGivesZeroActivationChange) {
  TaskSpec t;
  t.samples = 100;
  auto [src, tgt] = generate_task(t);
  AdaptConfig cfg;
  cfg.source_steps = 100;
  const SourceResult s = run_source_stage(cfg, src);
  ProbeConfig pc;
  pc.step_lr = 0.0;
  pc.topk = false;
  const ProbeSample p = probe_correlations(s.model, tgt.x, 0, pc);
  ASSERT_FALSE(p.skipped);
  for (const char* k : {"delta_u", "delta_n", "delta_i"})
    EXPECT_EQ(norm2(p.vectors.at(k)), 0.0) << k;
  EXPECT_FALSE(p.vectors.count("topk_1"));
}

TEST(Probe, ZeroAdversarialGradientGivesUndefinedCosines) {
  Model m = Model::initialize({}, 3, 0.05);
  m.head.weight.fill(0.0);
  m.head.bias.fill(0.0);
  TaskSpec t;
  t.samples = 50;
  auto [src, tgt] = generate_task(t);
  // Every perturbation is zero, so no row enters a cosine involving one.
  const ProbeSample p = probe_correlations(m, tgt.x, 0, {});
  EXPECT_FALSE(p.skipped);
  for (const char* key : {"grad_n:r_n", "delta_n:r_n", "r_n:r_u"}) {
    const CosineStat& c = p.cosines.at(key);
    EXPECT_EQ(c.used, 0u) << key;
    EXPECT_TRUE(std::isnan(c.mean)) << key;
  }
  EXPECT_TRUE(std::isnan(probe_metrics(p).at("cos:grad_n:r_n")));
  EXPECT_EQ(probe_metrics(p).at("probe_skipped"), 0.0);
}

TEST(Sweep, ConfigMapping) {
  AdaptConfig cfg;
  cfg.loss = LossKind::apa_u;
  EXPECT_EQ(sweep_config(cfg, SweepParam::eps, 3.0).losses.apa_u.epsilon, 3.0);
  EXPECT_EQ(sweep_config(cfg, SweepParam::beta, 0.0).beta, 0.0);
  EXPECT_THROW(sweep_config(cfg, SweepParam::topk, 2.0), std::invalid_argument);
  cfg.loss = LossKind::apa_topk;
  EXPECT_EQ(sweep_config(cfg, SweepParam::topk, 2.0).losses.topk, 2u);
  EXPECT_THROW(sweep_config(cfg, SweepParam::topk, 1.5), std::invalid_argument);
  cfg.loss = LossKind::ent;
  EXPECT_THROW(sweep_config(cfg, SweepParam::eps, 1.0), std::invalid_argument);
  EXPECT_THROW(parse_sweep_param("lr"), std::invalid_argument);
}

TEST(Sweep, OrderAndResultsIndependentOfJobs) {
  TaskSpec t;
  t.samples = 300;
  auto [src, tgt] = generate_task(t);
  AdaptConfig cfg;
  cfg.source_steps = 200;
  cfg.adapt_steps = 60;
  cfg.eval_interval = 30;
  const SourceResult s = run_source_stage(cfg, src, &tgt);
  const std::vector<double> vals = {0.0, 0.1, 1.0};
  const auto a = sweep(cfg, s.model, &src, tgt, Setting::standard, SweepParam::beta, vals, 1);
  const auto b = sweep(cfg, s.model, &src, tgt, Setting::standard, SweepParam::beta, vals, 3);
  ASSERT_EQ(a.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(a[i].value, vals[i]);
    EXPECT_EQ(b[i].value, vals[i]);
    EXPECT_EQ(a[i].target_class_acc, b[i].target_class_acc);
    ASSERT_EQ(a[i].records.size(), b[i].records.size());
    for (std::size_t k = 0; k < a[i].records.size(); ++k)
      EXPECT_EQ(a[i].records[k].loss_total, b[i].records[k].loss_total);
  }
}

TEST(Smoothing, MovingAverage) {
  const auto m = moving_average({1, 2, 3, 4, 5}, 2);
  EXPECT_EQ(m, (std::vector<double>{1, 1.5, 2.5, 3.5, 4.5}));
  const auto w = moving_average({2, NAN, 4}, 10);
  EXPECT_EQ(w[0], 2.0);
  EXPECT_TRUE(std::isnan(w[1]));
  EXPECT_EQ(w[2], 3.0);
  EXPECT_THROW(moving_average({1}, 0), std::invalid_argument);
  std::vector<double> ramp(30);
  for (std::size_t i = 0; i < 30; ++i) ramp[i] = static_cast<double>(i);
  EXPECT_DOUBLE_EQ(moving_average(ramp)[29], 24.5);
}
