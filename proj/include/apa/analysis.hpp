#pragma once

// Diagnostics: perturbation / gradient / activation-change correlations,
// gradient shrinking under normalization, parameter sweeps and smoothing.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <map>
#include <mutex>
#include <numeric>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "apa/train.hpp"

namespace apa {

// ---------------------------------------------------------------------------
// Guarded cosines

struct CosineStat {
  double mean = std::numeric_limits<double>::quiet_NaN();
  std::size_t used = 0;
  std::size_t excluded = 0;  // rows where either vector is zero
};

/// Row-wise cosine averaged over the rows where both vectors are nonzero.
inline CosineStat mean_row_cosine(const Tensor& a, const Tensor& b) {
  a.require_same(b, "mean_row_cosine");
  CosineStat s;
  double sum = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double c = cosine(a.row(i), b.row(i));
    if (std::isnan(c)) {
      ++s.excluded;
      continue;
    }
    sum += c;
    ++s.used;
  }
  if (s.used) s.mean = sum / static_cast<double>(s.used);
  return s;
}

// ---------------------------------------------------------------------------
// Correlation probe

/// Activations at or below this norm are left out of the correlation probe.
inline constexpr double kMinProbeNorm = 1e-4;

struct ProbeConfig {
  PerturbParams apa_u{30.0, 10.0, 0};
  PerturbParams apa_n{1.0, 1.0, 0};
  PerturbParams vat{1.0, 1e-6, 0};
  double step_lr = 1e-3;
  bool topk = true;
  TopKSettings topk_settings;
  std::uint64_t seed = 0;
};

struct ProbeSample {
  std::uint64_t step = 0;
  bool skipped = false;
  std::string reason;
  /// r_u, r_n, grad_u, grad_n, delta_u, delta_n, delta_i and topk_<k>; one
  /// row per probe sample.
  std::map<std::string, Tensor> vectors;
  /// Keyed "a:b" over every pair of vectors.
  std::map<std::string, CosineStat> cosines;
};

namespace detail {

/// Gradient of the mean KL(clean || g(u)) with respect to `base`, where
/// u = zeta(base + r) when `renormalize`, else base + r.
inline Tensor head_gradient(const Model& m, const Tensor& base, const Tensor& r,
                            bool renormalize, const Tensor& clean_log_p) {
  ad::Graph g;
  BoundModel bm = bind(g, m, false);
  ad::Var b = g.leaf(base);
  ad::Var u = ad::add(b, g.constant(r));
  if (renormalize) u = ad::normalize_rows(u);
  ad::Var lq = ad::log_softmax_rows(head_logits(bm, u), m.head.temperature);
  g.backward(ad::mean(ad::kl_from_log_probs(g.constant(clean_log_p), lq)));
  return g.grad(b);
}

/// zeta(f*(x)) - zeta(f(x)) after one plain gradient step of `lr` on the
/// loss built by `loss`. Rows whose activation vanishes either before or
/// after come out as zero vectors.
template <class LossFn>
inline Tensor activation_change(const Model& m, const Tensor& x, const Tensor& z_before,
                                double lr, LossFn&& loss) {
  Model moved = m;
  {
    ad::Graph g;
    BoundModel bm = bind(g, moved, true);
    ad::Var z = extract(bm, g.constant(x), {Mode::eval, nullptr});
    g.backward(loss(bm, z));
    auto params = moved.parameters();
    for (std::size_t k = 0; k < params.size(); ++k) {
      const Tensor grad = g.grad(bm.params[k]);
      auto p = params[k]->values();
      for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * grad[i];
    }
  }
  ad::Graph g;
  BoundModel bm = bind(g, moved, false);
  const Tensor z_after = extract(bm, g.constant(x), {Mode::eval, nullptr}).value();
  Tensor delta(z_before.shape());
  for (std::size_t i = 0; i < delta.rows(); ++i) {
    const double na = norm2(z_after.row(i)), nb = norm2(z_before.row(i));
    if (!(na > 0.0) || !(nb > 0.0)) continue;
    for (std::size_t c = 0; c < delta.cols(); ++c)
      delta.at(i, c) = z_after.at(i, c) / na - z_before.at(i, c) / nb;
  }
  return delta;
}

}  // namespace detail

/// Perturbations, activation gradients and actual activation changes for a
/// probe batch. The model is copied; the live one is never touched.
inline ProbeSample probe_correlations(const Model& m, const Tensor& x, std::uint64_t step,
                                      const ProbeConfig& cfg) {
  ProbeSample s;
  s.step = step;
  const std::size_t n = x.rows();

  ad::Graph g0;
  BoundModel b0 = bind(g0, m, false);
  const Tensor z = extract(b0, g0.constant(x), {Mode::eval, nullptr}).value();
  // Rows this close to dead can be switched off by the input-space probe.
  std::vector<std::size_t> live;
  for (std::size_t i = 0; i < n; ++i)
    if (norm2(z.row(i)) > kMinProbeNorm) live.push_back(i);
  if (live.empty()) {
    s.skipped = true;
    s.reason = "all probe activations are zero";
    return s;
  }
  Tensor xl = gather_rows(x, live);
  Tensor zl = gather_rows(z, live);
  std::vector<std::uint64_t> lid(live.begin(), live.end());
  PerturbParams pu = cfg.apa_u, pn = cfg.apa_n, pv = cfg.vat;
  pu.seed = pn.seed = pv.seed = derive_seed(cfg.seed, 0x9b0be);

  // The input-space perturbation comes first: rows whose perturbed input has
  // a zero activation are dropped before anything else is computed. Rows
  // with saturated predictions get r = 0, as in training, and drop out of
  // the cosine means.
  Tensor r_v;
  try {
    r_v = vat_direction(m, xl, clean_log_probs(make_activation_record(zl), m.head), pv,
                        Mode::eval, lid, step, OnProbeFailure::zero);
  } catch (const std::exception& e) {
    s.skipped = true;
    s.reason = e.what();
    return s;
  }
  {
    ad::Graph g;
    BoundModel bm = bind(g, m, false);
    const Tensor zv = extract(bm, g.constant(xl + r_v), {Mode::eval, nullptr}).value();
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < zv.rows(); ++i)
      if (norm2(zv.row(i)) > 0.0) keep.push_back(i);
    if (keep.empty()) {
      s.skipped = true;
      s.reason = "every perturbed input has a zero activation";
      return s;
    }
    if (keep.size() < zv.rows()) {
      xl = gather_rows(xl, keep);
      zl = gather_rows(zl, keep);
      r_v = gather_rows(r_v, keep);
      std::vector<std::uint64_t> kid;
      for (std::size_t i : keep) kid.push_back(lid[i]);
      lid = std::move(kid);
    }
  }
  const ActivationRecord act = make_activation_record(zl);
  const Tensor clean = clean_log_probs(act, m.head);

  Tensor r_u, r_n;
  try {
    r_u = approx_direction(act, m.head, pu, Variant::u, lid, step, OnProbeFailure::zero);
    r_n = approx_perturbation(act, m.head, pn, Variant::n, lid, step, OnProbeFailure::zero).r;
  } catch (const PerturbationFailure& e) {
    s.skipped = true;
    s.reason = e.what();
    return s;
  }

  auto& v = s.vectors;
  try {
    v["r_u"] = r_u;
    v["r_n"] = r_n;
    v["grad_u"] = detail::head_gradient(m, act.z, r_u, true, clean);
    v["grad_n"] = detail::head_gradient(m, act.z_norm, r_n, false, clean);
    auto adv_step = [&](const Tensor& r, OuterForm form) {
      return detail::activation_change(m, xl, zl, cfg.step_lr, [&](const BoundModel& bm, ad::Var zz) {
        ad::Graph& g = *zz.graph;
        return ad::mean(outer_kl_rows(bm, zz, r, form, g.constant(clean)));
      });
    };
    v["delta_u"] = adv_step(r_u, OuterForm::unnormalized);
    v["delta_n"] = adv_step(r_n, OuterForm::normalized);
    v["delta_i"] = detail::activation_change(m, xl, zl, cfg.step_lr, [&](const BoundModel& bm, ad::Var zz) {
      ad::Graph& g = *zz.graph;
      return ad::mean(vat_outer_rows(bm, g.constant(xl), r_v, g.constant(clean), Mode::eval));
    });
    if (cfg.topk) {
      for (std::size_t k = 1; k <= m.classes(); ++k)
        v["topk_" + std::to_string(k)] =
            topk_perturbation(act, m.head, cfg.apa_n.epsilon, k, Variant::n, cfg.topk_settings).r;
    }
  } catch (const DegenerateInput& e) {
    // A perturbed input can land on a zero penultimate activation.
    v.clear();
    s.skipped = true;
    s.reason = e.what();
    return s;
  }
  for (auto a = v.begin(); a != v.end(); ++a)
    for (auto b = std::next(a); b != v.end(); ++b)
      s.cosines[a->first + ":" + b->first] = mean_row_cosine(a->second, b->second);
  return s;
}

/// `count` target rows picked by a seeded shuffle; fixed for a whole run.
inline Tensor probe_batch(const Dataset& target, std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> idx(target.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(count, idx.size()));
  return gather_rows(target.x, idx);
}

/// Flattens the batch-averaged cosines of a sample into RunRecord probes:
/// "cos:<a>:<b>" entries plus "probe_skipped".
inline std::map<std::string, double> probe_metrics(const ProbeSample& s) {
  std::map<std::string, double> out;
  out["probe_skipped"] = s.skipped ? 1.0 : 0.0;
  for (const auto& [k, c] : s.cosines) out["cos:" + k] = c.mean;
  return out;
}

/// A ProbeHook running probe_correlations on a fixed batch of the target set.
inline ProbeHook correlation_hook(const Dataset& target, std::size_t batch,
                                  const ProbeConfig& cfg) {
  Tensor x = probe_batch(target, batch, derive_seed(cfg.seed, 0xba7c4));
  return [x = std::move(x), cfg](std::uint64_t step, const Model& m) {
    return probe_metrics(probe_correlations(m, x, step, cfg));
  };
}

// ---------------------------------------------------------------------------
// Shrinking probe

struct ShrinkSample {
  double grad_u_norm = 0.0;  // ||d l_u / d z||
  double grad_n_norm = 0.0;  // ||d l_n / d zbar|| at the mapped perturbation
  double perturbed_norm = 0.0;  // ||z + r_u||

  /// ||grad_u|| ||z + r|| / ||grad_n||; 1 when the head gradient is
  /// orthogonal to zeta(z + r).
  double ratio() const { return grad_u_norm * perturbed_norm / grad_n_norm; }
};

/// Per-row gradient norms of the un-normalized loss at r_u and of the
/// normalized loss at the u->n mapping of r_u. Both losses have the same
/// value, so the two gradients differ only by the normalization Jacobian.
inline std::vector<ShrinkSample> shrink_samples(const ActivationRecord& act,
                                                const LinearClassifier& clf, const Tensor& r_u) {
  Perturbation pu;
  pu.r = r_u;
  pu.space = Space::penult_unnormalized;
  pu.epsilon = 0.0;
  for (std::size_t i = 0; i < r_u.rows(); ++i) pu.epsilon = std::max(pu.epsilon, norm2(r_u.row(i)));
  const Tensor r_n = map_norm_unnorm(pu, act, MapDirection::u_to_n).r;
  Model m;
  m.head = clf;
  const Tensor clean = clean_log_probs(act, clf);
  // Per-row gradients: the losses are means, so scale back by n.
  const double n = static_cast<double>(act.z.rows());
  const Tensor gu = detail::head_gradient(m, act.z, r_u, true, clean);
  const Tensor gn = detail::head_gradient(m, act.z_norm, r_n, false, clean);
  std::vector<ShrinkSample> out(act.z.rows());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].grad_u_norm = n * norm2(gu.row(i));
    out[i].grad_n_norm = n * norm2(gn.row(i));
    double sq = 0.0;
    for (std::size_t c = 0; c < act.z.cols(); ++c) {
      const double w = act.z.at(i, c) + r_u.at(i, c);
      sq += w * w;
    }
    out[i].perturbed_norm = std::sqrt(sq);
  }
  return out;
}

struct ShrinkRow {
  double epsilon = 0.0;
  double mean_ratio = 0.0;
  double min_ratio = 0.0;
  double max_ratio = 0.0;
  double mean_perturbed_norm = 0.0;
  double mean_grad_ratio = 0.0;  // ||grad_u|| / ||grad_n||
  std::size_t used = 0;
};

/// Shrinking table over an epsilon grid for a batch of inputs, using the
/// one-step APA^u perturbation at each epsilon.
inline std::vector<ShrinkRow> probe_shrinking(const Model& m, const Tensor& x,
                                              const std::vector<double>& eps_grid, double xi,
                                              std::uint64_t seed) {
  ad::Graph g;
  BoundModel bm = bind(g, m, false);
  const Tensor z = extract(bm, g.constant(x), {Mode::eval, nullptr}).value();
  std::vector<std::size_t> live;
  for (std::size_t i = 0; i < z.rows(); ++i)
    if (norm2(z.row(i)) > 0.0) live.push_back(i);
  const ActivationRecord act = make_activation_record(gather_rows(z, live));
  std::vector<ShrinkRow> rows;
  for (double eps : eps_grid) {
    const Tensor r = approx_direction(act, m.head, {eps, xi, seed}, Variant::u, {}, 0,
                                      OnProbeFailure::zero);
    ShrinkRow row;
    row.epsilon = eps;
    row.min_ratio = std::numeric_limits<double>::infinity();
    row.max_ratio = -std::numeric_limits<double>::infinity();
    for (const ShrinkSample& s : shrink_samples(act, m.head, r)) {
      if (!(s.grad_n_norm > 0.0)) continue;
      const double q = s.ratio();
      row.mean_ratio += q;
      row.min_ratio = std::min(row.min_ratio, q);
      row.max_ratio = std::max(row.max_ratio, q);
      row.mean_perturbed_norm += s.perturbed_norm;
      row.mean_grad_ratio += s.grad_u_norm / s.grad_n_norm;
      ++row.used;
    }
    if (row.used) {
      const double k = 1.0 / static_cast<double>(row.used);
      row.mean_ratio *= k;
      row.mean_perturbed_norm *= k;
      row.mean_grad_ratio *= k;
    }
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Sweeps

enum class SweepParam { eps, beta, topk };

inline SweepParam parse_sweep_param(const std::string& s) {
  if (s == "eps") return SweepParam::eps;
  if (s == "beta") return SweepParam::beta;
  if (s == "topk") return SweepParam::topk;
  throw std::invalid_argument("unknown sweep parameter '" + s + "' (eps, beta, topk)");
}

inline const char* sweep_param_name(SweepParam p) {
  switch (p) {
    case SweepParam::eps: return "eps";
    case SweepParam::beta: return "beta";
    case SweepParam::topk: return "topk";
  }
  return "?";
}

/// Config for one sweep value. eps goes to the perturbation budget of the
/// selected loss; topk requires the top-k loss.
inline AdaptConfig sweep_config(AdaptConfig cfg, SweepParam p, double value) {
  switch (p) {
    case SweepParam::beta:
      cfg.beta = value;
      break;
    case SweepParam::topk:
      if (cfg.loss != LossKind::apa_topk)
        throw std::invalid_argument("topk sweep needs loss apa-topk");
      if (value < 1.0 || value != std::floor(value))
        throw std::invalid_argument("topk values must be positive integers");
      cfg.losses.topk = static_cast<std::size_t>(value);
      break;
    case SweepParam::eps:
      switch (cfg.loss) {
        case LossKind::apa_u:
        case LossKind::apa_u_comp:
        case LossKind::apa_u2n:
          cfg.losses.apa_u.epsilon = value;
          break;
        case LossKind::apa_n:
        case LossKind::apa_n_prime:
        case LossKind::apa_n2u:
        case LossKind::apa_topk:
          cfg.losses.apa_n.epsilon = value;
          break;
        case LossKind::apa_i:
        case LossKind::apa_i2p:
          cfg.losses.intermediate.epsilon = value;
          break;
        case LossKind::vat:
          cfg.losses.vat.epsilon = value;
          break;
        default:
          throw std::invalid_argument("loss " + loss_name(cfg.loss) + " has no eps");
      }
      break;
  }
  cfg.validate();
  return cfg;
}

struct SweepPoint {
  double value = 0.0;
  double target_class_acc = 0.0;
  double target_acc = 0.0;
  std::vector<RunRecord> records;
};

/// One adaptation run per value from the shared stage-1 model. Values run on
/// up to `jobs` threads; results are stored by value index, so the output
/// does not depend on scheduling.
inline std::vector<SweepPoint> sweep(const AdaptConfig& base, const Model& stage1,
                                     const Dataset* source, const Dataset& target,
                                     Setting setting, SweepParam param,
                                     const std::vector<double>& values, std::size_t jobs = 1) {
  std::vector<AdaptConfig> cfgs;
  for (double v : values) cfgs.push_back(sweep_config(base, param, v));
  std::vector<SweepPoint> out(values.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < values.size(); i = next++) {
      try {
        AdaptResult r = run_adapt_stage(cfgs[i], stage1, source, target, setting);
        out[i].value = values[i];
        out[i].target_class_acc = r.records.back().target_class_acc;
        out[i].target_acc = r.records.back().target_acc;
        out[i].records = std::move(r.records);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  jobs = std::max<std::size_t>(1, std::min(jobs, values.size()));
  std::vector<std::thread> pool;
  for (std::size_t j = 1; j < jobs; ++j) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return out;
}

// ---------------------------------------------------------------------------
// Smoothing

/// Trailing mean over the last `window` finite values (fewer at the start).
/// NaN entries stay NaN and are skipped by later windows.
inline std::vector<double> moving_average(const std::vector<double>& xs, std::size_t window = 10) {
  if (window == 0) throw std::invalid_argument("moving_average: window must be positive");
  std::vector<double> out(xs.size(), std::numeric_limits<double>::quiet_NaN());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (std::isnan(xs[i])) continue;
    double sum = 0.0;
    std::size_t cnt = 0;
    for (std::size_t j = i + 1 > window ? i + 1 - window : 0; j <= i; ++j) {
      if (std::isnan(xs[j])) continue;
      sum += xs[j];
      ++cnt;
    }
    out[i] = sum / static_cast<double>(cnt);
  }
  return out;
}

}  // namespace apa
