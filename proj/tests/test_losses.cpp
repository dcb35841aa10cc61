#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "apa/gradcheck.hpp"
#include "apa/losses.hpp"

using namespace apa;

namespace {

Tensor random_batch(std::size_t n, std::size_t d, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> N(0.0, scale);
  Tensor t({n, d});
  for (double& v : t.values()) v = N(rng);
  return t;
}

std::vector<std::uint64_t> iota_ids(std::size_t n) {
  std::vector<std::uint64_t> ids(n);
  std::iota(ids.begin(), ids.end(), 0);
  return ids;
}

/// Log-probabilities node holding `rows` exactly (rows are probabilities).
ad::Var log_probs_of(ad::Graph& g, const std::vector<std::vector<double>>& rows) {
  Tensor t = stack_rows(rows);
  for (double& v : t.values()) v = std::log(v);
  return g.constant(t);
}

struct Fixture {
  Model m = Model::initialize({}, 21, 0.05);
  Tensor x = random_batch(12, 8, 5);
  std::vector<std::uint64_t> ids = iota_ids(12);
};

}  // namespace

TEST(Entropy, UniformAndOneHot) {
  ad::Graph g;
  TargetForward f;
  f.log_probs = log_probs_of(g, {{0.25, 0.25, 0.25, 0.25}, {0.25, 0.25, 0.25, 0.25}});
  EXPECT_NEAR(ent_loss(f).scalar(), std::log(4.0), 1e-14);
  ad::Var big = g.constant(Tensor::matrix(2, 3, {100, 0, 0, 0, 100, 0}));
  f.log_probs = ad::log_softmax_rows(big, 0.05);
  EXPECT_NEAR(ent_loss(f).scalar(), 0.0, 1e-12);
}

TEST(MutualInformation, CollapseIsPenalized) {
  ad::Graph g;
  TargetForward collapsed, diverse;
  collapsed.z = g.constant(Tensor::scalar(0));
  diverse.z = collapsed.z;
  collapsed.log_probs = ad::log_softmax_rows(
      g.constant(Tensor::matrix(2, 2, {100, 0, 100, 0})), 0.05);
  diverse.log_probs = ad::log_softmax_rows(
      g.constant(Tensor::matrix(2, 2, {100, 0, 0, 100})), 0.05);
  const double mc = mi_loss(collapsed).scalar();
  const double md = mi_loss(diverse).scalar();
  EXPECT_NEAR(mc, 0.0, 1e-12);
  EXPECT_NEAR(md, -std::log(2.0), 1e-12);
  EXPECT_NEAR(mc - md, std::log(2.0), 1e-12);
}

TEST(FixMatch, FullyMaskedBatchGivesZero) {
  Fixture fx;
  ad::Graph g;
  BoundModel bm = bind(g, fx.m, true);
  FeatureStats st = FeatureStats::of(fx.x);
  auto res = fixmatch_loss(bm, fx.x, 1.01, {}, st, fx.ids, 1, 0, Mode::eval);
  EXPECT_EQ(res.kept, 0u);
  EXPECT_EQ(res.term.scalar(), 0.0);
}

TEST(FixMatch, IdentityViewsReduceToSelfTraining) {
  Fixture fx;
  ad::Graph g;
  BoundModel bm = bind(g, fx.m, true);
  FeatureStats st = FeatureStats::of(fx.x);
  JitterConfig none{0.0, 0.0, 0.0};
  auto res = fixmatch_loss(bm, fx.x, 0.0, none, st, fx.ids, 1, 0, Mode::eval);
  EXPECT_EQ(res.kept, 12u);
  TargetForward f = forward_batch(bm, fx.x, {Mode::eval, nullptr});
  std::vector<std::size_t> own(12);
  for (std::size_t i = 0; i < 12; ++i) {
    auto r = f.log_probs.value().row(i);
    own[i] = std::max_element(r.begin(), r.end()) - r.begin();
  }
  EXPECT_NEAR(res.term.scalar(), cross_entropy(f.log_probs, own).value()[0], 1e-14);
}

TEST(Jitter, DeterministicPerSample) {
  Tensor x = random_batch(4, 3, 1);
  FeatureStats st = FeatureStats::of(x);
  const std::vector<std::uint64_t> ids = {7, 8, 9, 10};
  Tensor a = jitter(x, st, 0.25, 0.2, ids, 3, 5, 1);
  Tensor b = jitter(x, st, 0.25, 0.2, ids, 3, 5, 1);
  EXPECT_EQ(a, b);
  Tensor c = jitter(x, st, 0.25, 0.2, ids, 3, 6, 1);
  EXPECT_NE(a, c);
  EXPECT_EQ(jitter(x, st, 0.0, 0.0, ids, 3, 5, 1), x);
}

TEST(Sentry, SelectionRules) {
  const std::vector<std::uint64_t> ids = {0, 1};
  // All views agree: every sample is consistent, one +1 per row.
  std::vector<std::vector<bool>> all(2, std::vector<bool>(3, true));
  std::size_t consistent = 0;
  auto s = sentry_selection(all, 0.5, ids, 1, 0, &consistent);
  EXPECT_EQ(consistent, 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    double total = 0.0;
    for (const Tensor& t : s) total += t[i];
    EXPECT_EQ(total, 1.0);
  }
  // All disagree: pure entropy maximization.
  std::vector<std::vector<bool>> none(2, std::vector<bool>(3, false));
  s = sentry_selection(none, 0.5, ids, 1, 0, &consistent);
  EXPECT_EQ(consistent, 0u);
  for (std::size_t i = 0; i < 2; ++i) {
    double total = 0.0;
    for (const Tensor& t : s) total += t[i];
    EXPECT_EQ(total, -1.0);
  }
  // 1 of 3 agree is a minority; the chosen view must be a disagreeing one.
  std::vector<std::vector<bool>> minority = {{true, false, false}, {false, true, true}};
  s = sentry_selection(minority, 0.5, ids, 1, 0, &consistent);
  EXPECT_EQ(consistent, 1u);
  // sign[view][sample]
  EXPECT_EQ(s[0][0], 0.0);
  EXPECT_EQ(s[1][0] + s[2][0], -1.0);
  EXPECT_EQ(s[0][1], 0.0);
  EXPECT_EQ(s[1][1] + s[2][1], 1.0);
}

TEST(Sentry, AgreeingCommitteeMinimizesEntropy) {
  Fixture fx;
  ad::Graph g;
  BoundModel bm = bind(g, fx.m, true);
  FeatureStats st = FeatureStats::of(fx.x);
  CommitteeConfig cc;
  cc.noise_scale = 0.0;  // views equal the clean batch
  PredictionHistory hist(cc.history);
  TargetForward f = forward_batch(bm, fx.x, {Mode::eval, nullptr});
  auto res = sentry_loss(bm, f, cc, st, hist, fx.ids, 1, 0, Mode::eval);
  EXPECT_EQ(res.consistent, 12u);
  // With a single batch in the history, qbar = hbar.
  const Tensor& lp = f.log_probs.value();
  std::vector<double> hbar(4, 0.0);
  for (std::size_t i = 0; i < 12; ++i)
    for (std::size_t c = 0; c < 4; ++c) hbar[c] += std::exp(lp.at(i, c)) / 12.0;
  double div = 0.0;
  for (double h : hbar) div += h * std::log(h);
  EXPECT_NEAR(res.term.scalar(), ent_loss(f).scalar() + div, 1e-12);
}

TEST(PredictionHistoryTest, SlidingWindowMatchesDirectRecomputation) {
  PredictionHistory h(5);
  std::vector<std::vector<double>> all;
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  for (int batch = 0; batch < 6; ++batch) {
    std::vector<std::vector<double>> rows;
    for (int i = 0; i < 3; ++i) {
      double a = U(rng);
      rows.push_back({a, 1.0 - a});
      all.push_back(rows.back());
    }
    h.push(stack_rows(rows));
    const std::size_t k = std::min<std::size_t>(5, all.size());
    double m0 = 0.0;
    for (std::size_t j = all.size() - k; j < all.size(); ++j) m0 += all[j][0];
    EXPECT_NEAR(h.mean()[0], m0 / k, 1e-15);
    EXPECT_EQ(h.size(), k);
  }
}

TEST(Adversarial, ZeroPerturbationGivesZeroLoss) {
  Fixture fx;
  ad::Graph g;
  BoundModel bm = bind(g, fx.m, true);
  TargetForward f = forward_batch(bm, fx.x, {Mode::eval, nullptr});
  const Tensor zero(f.z.value().shape());
  for (OuterForm form : {OuterForm::unnormalized, OuterForm::normalized, OuterForm::renormalized}) {
    ad::Var kl = outer_kl_rows(bm, f.z, zero, form, kl_target(f, true));
    for (double v : kl.value().values()) EXPECT_NEAR(v, 0.0, 1e-12);
  }
}

TEST(Adversarial, LossesAreNonnegativeAndSeeded) {
  Fixture fx;
  for (AdvKind k : {AdvKind::u, AdvKind::u_compensated, AdvKind::n, AdvKind::n_prime,
                    AdvKind::n_to_u, AdvKind::u_to_n, AdvKind::topk}) {
    double first = 0.0;
    for (int rep = 0; rep < 2; ++rep) {
      ad::Graph g;
      BoundModel bm = bind(g, fx.m, true);
      TargetForward f = forward_batch(bm, fx.x, {Mode::eval, nullptr});
      const bool u_space = k == AdvKind::u || k == AdvKind::u_compensated || k == AdvKind::u_to_n;
      AdversarialOptions opt{u_space ? PerturbParams{30, 10, 4} : PerturbParams{1, 1, 4},
                             3, fx.ids, true, 2, {}};
      LossTerm t = adversarial_loss(bm, f, k, opt);
      EXPECT_GE(t.scalar(), 0.0) << adv_name(k);
      if (rep == 0) first = t.scalar();
      else EXPECT_EQ(first, t.scalar()) << adv_name(k);
    }
  }
}

TEST(Adversarial, RenormalizedEqualsProjectedOnTheSphere) {
  Fixture fx;
  ad::Graph g;
  BoundModel bm = bind(g, fx.m, true);
  TargetForward f = forward_batch(bm, fx.x, {Mode::eval, nullptr});
  const ActivationRecord act = make_activation_record(f.z.value());
  Perturbation p = approx_perturbation(act, fx.m.head, {1, 1, 2}, Variant::n, fx.ids);
  ad::Var a = outer_kl_rows(bm, f.z, p.r, OuterForm::normalized, kl_target(f, true));
  ad::Var b = outer_kl_rows(bm, f.z, p.r, OuterForm::renormalized, kl_target(f, true));
  for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(a.value()[i], b.value()[i], 1e-10);
}

TEST(Adversarial, MappedForwardIdentities) {
  Fixture fx;
  ad::Graph g;
  BoundModel bm = bind(g, fx.m, true);
  TargetForward f = forward_batch(bm, fx.x, {Mode::eval, nullptr});
  const ActivationRecord act = make_activation_record(f.z.value());
  Perturbation rn = approx_perturbation(act, fx.m.head, {1, 1, 2}, Variant::n, fx.ids);
  Perturbation ru = approx_perturbation(act, fx.m.head, {30, 10, 2}, Variant::u, fx.ids);
  ad::Var lp = kl_target(f, true);
  auto pn = outer_kl_rows(bm, f.z, rn.r, OuterForm::normalized, lp).value();
  auto pu_n2u = outer_kl_rows(bm, f.z, map_norm_unnorm(rn, act, MapDirection::n_to_u).r,
                              OuterForm::unnormalized, lp).value();
  auto pu = outer_kl_rows(bm, f.z, ru.r, OuterForm::unnormalized, lp).value();
  auto pn_u2n = outer_kl_rows(bm, f.z, map_norm_unnorm(ru, act, MapDirection::u_to_n).r,
                              OuterForm::normalized, lp).value();
  for (std::size_t i = 0; i < 12; ++i) {
    EXPECT_NEAR(pn[i], pu_n2u[i], 1e-10);
    EXPECT_NEAR(pu[i], pn_u2n[i], 1e-10);
  }
}

TEST(Intermediate, MappedLossHasSameValueButDifferentGradient) {
  Fixture fx;
  std::vector<Tensor> grads;
  std::vector<double> values;
  for (bool mapped : {false, true}) {
    ad::Graph g;
    BoundModel bm = bind(g, fx.m, true);
    AdversarialOptions opt{{1.0, 1.0, 9}, 0, fx.ids, true, 1, {}};
    LossTerm t = intermediate_loss(bm, fx.x, 1, opt, Mode::eval, mapped);
    values.push_back(t.scalar());
    g.backward(t.value);
    grads.push_back(g.grad(bm.params[0]));
  }
  EXPECT_NEAR(values[0], values[1], 1e-10);
  EXPECT_GT(values[0], 0.0);
  EXPECT_GT(norm2(grads[0] - grads[1]) / norm2(grads[0]), 1e-3);
}

TEST(Vat, ZeroBudgetLimitAndNonnegative) {
  Fixture fx;
  ad::Graph g;
  BoundModel bm = bind(g, fx.m, true);
  TargetForward f = forward_batch(bm, fx.x, {Mode::eval, nullptr});
  AdversarialOptions opt{{1.0, 1e-6, 1}, 0, fx.ids, true, 1, {}};
  LossTerm t = vat_loss(bm, f, opt, Mode::eval);
  EXPECT_GT(t.scalar(), 0.0);
  ad::Var zero = vat_outer_rows(bm, f.x, Tensor(fx.x.shape()), kl_target(f, true), Mode::eval);
  for (double v : zero.value().values()) EXPECT_NEAR(v, 0.0, 1e-12);
  EXPECT_EQ(LossConfig{}.vat.xi, 1e-6);
}

TEST(Objectives, BetaZeroIsSourceCrossEntropy) {
  Fixture fx;
  ad::Graph g;
  BoundModel bm = bind(g, fx.m, true);
  TargetForward s = forward_batch(bm, fx.x, {Mode::train, nullptr});
  TargetForward t = forward_batch(bm, random_batch(12, 8, 6), {Mode::eval, nullptr});
  std::vector<std::size_t> y(12);
  for (std::size_t i = 0; i < 12; ++i) y[i] = i % 4;
  LossTerm ent = ent_loss(t);
  Objective o = objective_standard(s.log_probs, y, ent, 0.0);
  EXPECT_EQ(o.total.value()[0], cross_entropy(s.log_probs, y).value()[0]);
  Objective o2 = objective_standard(s.log_probs, y, ent, 0.1);
  EXPECT_NEAR(o2.total.value()[0], o.total.value()[0] + 0.1 * ent.scalar(), 1e-14);
  EXPECT_EQ(LossConfig{}.tau, 0.75);
}

TEST(Objectives, SourceFreeGate) {
  Fixture fx;
  ad::Graph g;
  BoundModel bm = bind(g, fx.m, true);
  TargetForward t = forward_batch(bm, fx.x, {Mode::eval, nullptr});
  std::vector<std::size_t> yhat(12, 1);
  std::vector<double> low(12, 0.5), mixed(12, 0.5);
  LossTerm ent = ent_loss(t);
  Objective o = objective_sourcefree(t.log_probs, yhat, low, 0.75, ent, 0.1);
  EXPECT_NEAR(o.total.value()[0], 0.1 * ent.scalar(), 1e-15);
  mixed[2] = 0.8;
  mixed[5] = 0.75;
  Objective o2 = objective_sourcefree(t.log_probs, yhat, mixed, 0.75, ent, 0.0);
  const Tensor& lp = t.log_probs.value();
  EXPECT_NEAR(o2.total.value()[0], -(lp.at(2, 1) + lp.at(5, 1)) / 12.0, 1e-14);
}

TEST(Objectives, CombinedGradientMatchesFiniteDifferences) {
  Fixture fx;
  const Tensor xt = random_batch(12, 8, 6);
  std::vector<std::size_t> y(12);
  for (std::size_t i = 0; i < 12; ++i) y[i] = i % 4;
  // Freeze perturbation and clean distribution at the initial parameters.
  ad::Graph g0;
  BoundModel b0 = bind(g0, fx.m, false);
  TargetForward f0 = forward_batch(b0, xt, {Mode::eval, nullptr});
  const ActivationRecord act = make_activation_record(f0.z.value());
  const Tensor r = approx_perturbation(act, fx.m.head, {1, 1, 0}, Variant::n, fx.ids).r;
  const Tensor target = f0.log_probs.value();
  const std::size_t head = fx.m.head_offset();
  for (std::size_t p : {std::size_t{0}, std::size_t{2}, head}) {
    ad::ScalarFn fn = [&, p](ad::Graph& g, ad::Var input) {
      Model copy = fx.m;
      *copy.parameters()[p] = input.value();
      BoundModel bm = bind(g, copy, false);
      bm.params[p] = input;
      std::size_t k = 0;
      for (BoundBlock& b : bm.blocks) {
        b.weight = bm.params[k++];
        b.bias = bm.params[k++];
        b.gamma = bm.params[k++];
        b.beta = bm.params[k++];
      }
      bm.head_weight = bm.params[k++];
      bm.head_bias = bm.params[k++];
      TargetForward s = forward_batch(bm, fx.x, {Mode::train, nullptr});
      TargetForward t = forward_batch(bm, xt, {Mode::eval, nullptr});
      LossTerm adv{"apa_n",
                   ad::mean(outer_kl_rows(bm, t.z, r, OuterForm::normalized, g.constant(target))),
                   1.0};
      return objective_standard(s.log_probs, y, adv, 0.1).total;
    };
    auto res = ad::finite_diff_check(fn, *fx.m.parameters()[p], 1e-5);
    EXPECT_LT(res.max_rel_error, 1e-5) << "parameter " << p;
  }
}

TEST(Registry, NamesRoundTrip) {
  for (const auto& [name, kind] : loss_registry()) EXPECT_EQ(loss_name(kind), name);
  EXPECT_THROW(parse_loss("apa-x"), std::invalid_argument);
}
