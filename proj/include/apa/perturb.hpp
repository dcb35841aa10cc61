#pragma once

// Adversarial perturbations of penultimate activations.
//
// With the activation z held fixed, the inner problem
//   max_{||r|| <= eps} KL( softmax(g(zbar)/T) || softmax(g(zeta(base + r))/T) )
// only involves the linear head, where base is z (un-normalized variant) or
// zbar = z/||z|| (normalized variant) and zeta is l2 normalization.
//
// approx_perturbation takes the one-step route through the autodiff graph.
// The oracle and top-k solvers use a closed-form gradient of the same
// objective, which keeps them an independent check of the graph route.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "apa/autodiff.hpp"
#include "apa/model.hpp"

namespace apa {

enum class Variant { u, n };

enum class Space { input, intermediate, penult_unnormalized, penult_normalized };

/// Perturbation vectors for a batch (one row per sample).
struct Perturbation {
  Tensor r;
  double epsilon = 0.0;
  Space space = Space::penult_unnormalized;
  std::size_t layer = 0;   // block boundary, for Space::intermediate
  bool projected = false;  // rows were mapped back onto the unit sphere

  /// Budget check ||r_i|| <= eps (+1e-9). A projected perturbation is bounded
  /// by the sphere condition instead and always passes.
  bool within_budget() const {
    if (projected) return true;
    for (std::size_t i = 0; i < r.rows(); ++i) {
      if (norm2(r.row(i)) > epsilon + 1e-9) return false;
    }
    return true;
  }
};

struct PerturbParams {
  double epsilon = 1.0;
  double xi = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(epsilon > 0.0) || !(xi > 0.0)) {
      throw std::invalid_argument("perturb: epsilon and xi must be positive");
    }
  }
};

/// Paper defaults: xi = 10, eps = 30 (un-normalized); xi = 1, eps = 1
/// (normalized).
inline PerturbParams default_params(Variant v, std::uint64_t seed = 0) {
  return v == Variant::u ? PerturbParams{30.0, 10.0, seed}
                         : PerturbParams{1.0, 1.0, seed};
}

class PerturbationFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// What a one-step solver does with a row whose probe gradient stays zero:
/// raise PerturbationFailure, or leave that row's perturbation at zero.
enum class OnProbeFailure { raise, zero };

// ---------------------------------------------------------------------------
// Seeding

/// splitmix64 finalizer.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t a, std::uint64_t b,
                                 std::uint64_t c = 0, std::uint64_t d = 0) {
  return mix64(mix64(mix64(mix64(a) ^ b) ^ c) ^ d);
}

inline std::vector<double> random_unit(std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (;;) {
    std::vector<double> v(dim);
    for (double& x : v) x = normal(rng);
    if (norm2(v) > 0.0) return normalized(v);
  }
}

// ---------------------------------------------------------------------------
// Helpers shared by the routes

/// Base point of the inner problem: z (variant u) or zbar (variant n).
inline const Tensor& inner_base(const ActivationRecord& act, Variant v) {
  return v == Variant::u ? act.z : act.z_norm;
}

/// log softmax(g(zbar)/T): the clean prediction, a constant in every inner
/// problem.
inline Tensor clean_log_probs(const ActivationRecord& act,
                              const LinearClassifier& clf) {
  ad::Graph g;
  ad::Var logits = ad::add_row(ad::linear(g.constant(act.z_norm), g.constant(clf.weight)),
                               g.constant(clf.bias));
  return ad::log_softmax_rows(logits, clf.temperature).value();
}

/// How the perturbed activation reaches the head.
enum class PerturbedForm {
  renormalized,  // zeta(base + r): APA^u with base = z, APA^n' with base = zbar
  additive,      // zbar + r: APA^n after projection
};

/// Per-row KL( p_clean || softmax(g(perturbed)/T) ), evaluated in a graph
/// with every input constant.
inline std::vector<double> adversarial_kl(const Tensor& base,
                                          const Tensor& clean_log_p,
                                          const LinearClassifier& clf,
                                          const Tensor& r, PerturbedForm form) {
  ad::Graph g;
  ad::Var s = ad::add(g.constant(base), g.constant(r));
  if (form == PerturbedForm::renormalized) s = ad::normalize_rows(s);
  ad::Var logits = ad::add_row(ad::linear(s, g.constant(clf.weight)),
                               g.constant(clf.bias));
  ad::Var kl = ad::kl_from_log_probs(g.constant(clean_log_p),
                                     ad::log_softmax_rows(logits, clf.temperature));
  return kl.value().data();
}

/// Loss of the un-normalized variant at perturbation r: KL at zeta(z + r).
inline std::vector<double> loss_pu(const ActivationRecord& act,
                                   const LinearClassifier& clf, const Tensor& r) {
  return adversarial_kl(act.z, clean_log_probs(act, clf), clf, r,
                        PerturbedForm::renormalized);
}

/// Loss of the normalized variant at perturbation r: KL at zbar + r.
inline std::vector<double> loss_pn(const ActivationRecord& act,
                                   const LinearClassifier& clf, const Tensor& r) {
  return adversarial_kl(act.z_norm, clean_log_probs(act, clf), clf, r,
                        PerturbedForm::additive);
}

/// Loss of the un-projected normalized variant: KL at zeta(zbar + r).
inline std::vector<double> loss_pn_prime(const ActivationRecord& act,
                                         const LinearClassifier& clf,
                                         const Tensor& r) {
  return adversarial_kl(act.z_norm, clean_log_probs(act, clf), clf, r,
                        PerturbedForm::renormalized);
}

/// Inner objective of the argmax for `variant`, per row.
inline std::vector<double> inner_objective(const ActivationRecord& act,
                                           const LinearClassifier& clf,
                                           const Tensor& r, Variant variant) {
  return adversarial_kl(inner_base(act, variant), clean_log_probs(act, clf), clf,
                        r, PerturbedForm::renormalized);
}

// ---------------------------------------------------------------------------
// Projection and cross-space maps

/// zeta(zbar + r) - zbar, row-wise; afterwards ||zbar + r'|| = 1.
inline Tensor project_perturbation(const Tensor& z_norm, const Tensor& r) {
  z_norm.require_same(r, "project_perturbation");
  Tensor out(r.shape());
  for (std::size_t i = 0; i < r.rows(); ++i) {
    std::vector<double> s(r.cols());
    for (std::size_t c = 0; c < r.cols(); ++c) s[c] = z_norm.at(i, c) + r.at(i, c);
    const double n = norm2(s);
    if (!(n > 0.0)) {
      throw DegenerateInput("project_perturbation: zbar + r is zero in row " +
                            std::to_string(i));
    }
    for (std::size_t c = 0; c < r.cols(); ++c) out.at(i, c) = s[c] / n - z_norm.at(i, c);
  }
  return out;
}

enum class MapDirection { n_to_u, u_to_n };

/// n->u: r * ||z||.  u->n: zeta(z + r) - zbar.
inline Perturbation map_norm_unnorm(const Perturbation& p,
                                    const ActivationRecord& act,
                                    MapDirection dir) {
  p.r.require_same(act.z, "map_norm_unnorm");
  Perturbation out;
  out.epsilon = p.epsilon;
  if (dir == MapDirection::n_to_u) {
    if (p.space != Space::penult_normalized) {
      throw std::invalid_argument("map n->u expects a normalized-space perturbation");
    }
    out.space = Space::penult_unnormalized;
    out.r = p.r;
    for (std::size_t i = 0; i < p.r.rows(); ++i) {
      if (!(act.norm[i] > 0.0)) throw DegenerateInput("map n->u: zero activation");
      for (double& v : out.r.row(i)) v *= act.norm[i];
    }
    out.epsilon = p.epsilon * *std::max_element(act.norm.begin(), act.norm.end());
    out.projected = p.projected;
  } else {
    if (p.space != Space::penult_unnormalized) {
      throw std::invalid_argument("map u->n expects an un-normalized perturbation");
    }
    out.space = Space::penult_normalized;
    out.r = Tensor(p.r.shape());
    for (std::size_t i = 0; i < p.r.rows(); ++i) {
      std::vector<double> s(p.r.cols());
      for (std::size_t c = 0; c < s.size(); ++c) s[c] = act.z.at(i, c) + p.r.at(i, c);
      const std::vector<double> u = normalized(s);
      for (std::size_t c = 0; c < s.size(); ++c) out.r.at(i, c) = u[c] - act.z_norm.at(i, c);
    }
    out.projected = true;
  }
  return out;
}

/// r^(i->p) = f^b(f^a(x) + r_i) - f(x), evaluated in eval mode.
inline Perturbation map_intermediate_to_penult(const Model& m, const Tensor& x,
                                               const Perturbation& r_i) {
  if (r_i.space != Space::intermediate) {
    throw std::invalid_argument("map_intermediate_to_penult: not an intermediate perturbation");
  }
  const SplitForward clean = forward_split(m, x, r_i.layer);
  clean.intermediate.require_same(r_i.r, "map_intermediate_to_penult");
  ad::Graph g;
  BoundModel bm = bind(g, m, false);
  ad::Var shifted = ad::add(g.constant(clean.intermediate), g.constant(r_i.r));
  ad::Var z_pert = apply_blocks(bm, shifted, r_i.layer, m.features.depth());
  Perturbation out;
  out.space = Space::penult_unnormalized;
  out.epsilon = r_i.epsilon;
  out.r = z_pert.value() - clean.z;
  return out;
}

/// ||z + r_u|| / ||z|| per row: loss weight of the compensated un-normalized
/// variant.
inline std::vector<double> norm_compensation(const ActivationRecord& act,
                                             const Tensor& r_u) {
  act.z.require_same(r_u, "norm_compensation");
  std::vector<double> out(act.z.rows());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(act.norm[i] > 0.0)) throw DegenerateInput("norm_compensation: zero activation");
    double s = 0.0;
    for (std::size_t c = 0; c < act.z.cols(); ++c) {
      const double v = act.z.at(i, c) + r_u.at(i, c);
      s += v * v;
    }
    out[i] = std::sqrt(s) / act.norm[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// One-step approximation (graph route)

/// Gradient w.r.t. r of the per-row inner objective at `r`, summed over rows
/// (rows are independent, so row i of the result is the gradient of row i).
inline Tensor inner_gradient(const Tensor& base, const Tensor& clean_log_p,
                             const LinearClassifier& clf, const Tensor& r) {
  ad::Graph g;
  ad::Var rv = g.leaf(r);
  ad::Var s = ad::normalize_rows(ad::add(g.constant(base), rv));
  ad::Var logits = ad::add_row(ad::linear(s, g.constant(clf.weight)),
                               g.constant(clf.bias));
  ad::Var kl = ad::kl_from_log_probs(g.constant(clean_log_p),
                                     ad::log_softmax_rows(logits, clf.temperature));
  g.backward(ad::sum(kl));
  return g.grad(rv);
}

inline constexpr int kMaxProbeAttempts = 8;

/// r = eps * normalize(grad_r l(r) at r = xi d), d a random unit vector per
/// sample seeded from (seed, step, sample id); no projection. A row whose
/// probe gradient vanishes is retried with a fresh d; after 8 attempts
/// `on_failure` decides.
inline Tensor approx_direction(const ActivationRecord& act,
                               const LinearClassifier& clf,
                               const PerturbParams& params, Variant variant,
                               std::span<const std::uint64_t> sample_ids = {},
                               std::uint64_t step = 0,
                               OnProbeFailure on_failure = OnProbeFailure::raise) {
  params.validate();
  const Tensor& base = inner_base(act, variant);
  const std::size_t n = base.rows(), d = base.cols();
  if (d != clf.dim()) throw DimensionMismatch("approx_perturbation: head width");
  const Tensor log_p = clean_log_probs(act, clf);

  Tensor r(base.shape());
  std::vector<std::size_t> pending(n);
  std::iota(pending.begin(), pending.end(), std::size_t{0});
  for (int attempt = 0; attempt < kMaxProbeAttempts && !pending.empty(); ++attempt) {
    Tensor sub_base({pending.size(), d}), sub_logp({pending.size(), clf.classes()});
    Tensor probe({pending.size(), d});
    for (std::size_t k = 0; k < pending.size(); ++k) {
      const std::size_t i = pending[k];
      const std::uint64_t id = sample_ids.empty() ? i : sample_ids[i];
      std::copy_n(base.row(i).begin(), d, sub_base.row(k).begin());
      std::copy_n(log_p.row(i).begin(), clf.classes(), sub_logp.row(k).begin());
      std::vector<double> dir = random_unit(d, derive_seed(params.seed, step, id, attempt));
      // A probe that lands exactly on the origin cannot be normalized; such a
      // row simply counts as a failed attempt.
      double sq = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        probe.at(k, c) = params.xi * dir[c];
        const double v = sub_base.at(k, c) + probe.at(k, c);
        sq += v * v;
      }
      if (sq == 0.0) probe.at(k, 0) += params.xi;
    }
    const Tensor grad = inner_gradient(sub_base, sub_logp, clf, probe);
    std::vector<std::size_t> still;
    for (std::size_t k = 0; k < pending.size(); ++k) {
      const double gn = norm2(grad.row(k));
      if (!(gn > 0.0) || !std::isfinite(gn)) {
        still.push_back(pending[k]);
        continue;
      }
      for (std::size_t c = 0; c < d; ++c)
        r.at(pending[k], c) = params.epsilon * grad.at(k, c) / gn;
    }
    pending = std::move(still);
  }
  if (!pending.empty() && on_failure == OnProbeFailure::raise) {
    throw PerturbationFailure("approx_perturbation: zero probe gradient for sample " +
                              std::to_string(pending.front()) + " after " +
                              std::to_string(kMaxProbeAttempts) + " attempts");
  }
  return r;
}

/// approx_direction followed, for variant n, by the projection onto the unit
/// sphere.
inline Perturbation approx_perturbation(const ActivationRecord& act,
                                        const LinearClassifier& clf,
                                        const PerturbParams& params,
                                        Variant variant,
                                        std::span<const std::uint64_t> sample_ids = {},
                                        std::uint64_t step = 0,
                                        OnProbeFailure on_failure = OnProbeFailure::raise) {
  Tensor r = approx_direction(act, clf, params, variant, sample_ids, step, on_failure);
  Perturbation out;
  out.epsilon = params.epsilon;
  if (variant == Variant::u) {
    out.space = Space::penult_unnormalized;
    out.r = std::move(r);
  } else {
    out.space = Space::penult_normalized;
    out.r = project_perturbation(act.z_norm, r);
    out.projected = true;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Closed-form route

namespace detail {

/// Cross-entropy H(target, softmax(g(zeta(base + r))/T)) and its gradient in
/// r, computed by hand. KL(p||q) = H(p, q) - H(p), so for a fixed target the
/// two share maximizers and gradients.
struct ClosedForm {
  const LinearClassifier* clf;
  std::span<const double> base;
  std::span<const double> target;

  double value(std::span<const double> r, std::span<double> grad = {}) const {
    const std::size_t d = base.size(), C = clf->classes();
    const double T = clf->temperature;
    std::vector<double> s(d);
    for (std::size_t c = 0; c < d; ++c) s[c] = base[c] + r[c];
    const double sn = norm2(s);
    if (!(sn > 0.0)) return std::numeric_limits<double>::quiet_NaN();
    std::vector<double> u(d);
    for (std::size_t c = 0; c < d; ++c) u[c] = s[c] / sn;
    std::vector<double> z(C);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < C; ++k) {
      double l = clf->bias[k];
      for (std::size_t c = 0; c < d; ++c) l += clf->weight.at(k, c) * u[c];
      z[k] = l / T;
      mx = std::max(mx, z[k]);
    }
    double se = 0.0;
    for (double v : z) se += std::exp(v - mx);
    const double lse = mx + std::log(se);
    double h = 0.0;
    for (std::size_t k = 0; k < C; ++k) h -= target[k] * (z[k] - lse);
    if (!grad.empty()) {
      // dH/dlogit_k = (q_k - p_k) / T; through W, then through zeta.
      std::vector<double> gu(d, 0.0);
      for (std::size_t k = 0; k < C; ++k) {
        const double coef = (std::exp(z[k] - lse) - target[k]) / T;
        for (std::size_t c = 0; c < d; ++c) gu[c] += coef * clf->weight.at(k, c);
      }
      const double along = dot(gu, u);
      for (std::size_t c = 0; c < d; ++c) grad[c] = (gu[c] - along * u[c]) / sn;
    }
    return h;
  }
};

inline void project_to_ball(std::span<double> r, double eps) {
  const double n = norm2(r);
  if (n > eps) {
    for (double& v : r) v *= eps / n;
  }
}

struct AscentSettings {
  int steps = 200;
  double initial_step = 0.0;  // absolute step length
};

/// Normalized projected gradient ascent with step halving on non-improving
/// proposals. Returns the final (best) point; `start` must be feasible.
inline std::vector<double> ascend(const ClosedForm& obj, std::vector<double> r,
                                  double eps, const AscentSettings& s,
                                  double* value_out) {
  const std::size_t d = r.size();
  std::vector<double> grad(d), trial(d);
  double current = obj.value(r, grad);
  double step = s.initial_step;
  for (int it = 0; it < s.steps && step > 1e-14 * std::max(eps, 1.0); ++it) {
    const double gn = norm2(grad);
    if (!(gn > 0.0) || !std::isfinite(gn)) break;
    for (std::size_t c = 0; c < d; ++c) trial[c] = r[c] + step * grad[c] / gn;
    project_to_ball(trial, eps);
    std::vector<double> trial_grad(d);
    const double v = obj.value(trial, trial_grad);
    if (std::isfinite(v) && v > current) {
      r = trial;
      grad = trial_grad;
      current = v;
    } else {
      step *= 0.5;
    }
  }
  if (value_out) *value_out = current;
  return r;
}

}  // namespace detail

struct OracleSettings {
  int restarts = 8;
  int steps = 200;
  /// Initial step as a fraction of eps.
  double step_fraction = 1.0 / 20.0;
  std::uint64_t seed = 0x0a11cafeULL;
};

/// Multi-restart projected gradient ascent on the inner problem; returns the
/// best r found per row (variant n rows are projected afterwards).
inline Perturbation oracle_perturbation(const ActivationRecord& act,
                                        const LinearClassifier& clf,
                                        double epsilon, Variant variant,
                                        const OracleSettings& settings = {}) {
  const Tensor& base = inner_base(act, variant);
  const std::size_t n = base.rows(), d = base.cols(), C = clf.classes();
  const Tensor log_p = clean_log_probs(act, clf);
  Tensor r(base.shape());
  if (epsilon > 0.0) {
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> p(C);
      for (std::size_t k = 0; k < C; ++k) p[k] = std::exp(log_p.at(i, k));
      const detail::ClosedForm obj{&clf, base.row(i), p};
      double best = -std::numeric_limits<double>::infinity();
      std::vector<double> best_r(d, 0.0);
      for (int k = 0; k < settings.restarts; ++k) {
        std::vector<double> start = random_unit(d, derive_seed(settings.seed, i, k));
        // Restarts alternate between the sphere of radius eps and half of it.
        const double radius = (k % 2 == 0) ? epsilon : 0.5 * epsilon;
        for (double& v : start) v *= radius;
        double val = 0.0;
        std::vector<double> cand = detail::ascend(
            obj, std::move(start), epsilon,
            {settings.steps, settings.step_fraction * epsilon}, &val);
        if (std::isfinite(val) && val > best) {
          best = val;
          best_r = std::move(cand);
        }
      }
      std::copy(best_r.begin(), best_r.end(), r.row(i).begin());
    }
  }
  Perturbation out;
  out.epsilon = epsilon;
  if (variant == Variant::u) {
    out.space = Space::penult_unnormalized;
    out.r = std::move(r);
  } else {
    out.space = Space::penult_normalized;
    out.r = epsilon > 0.0 ? project_perturbation(act.z_norm, r) : std::move(r);
    out.projected = epsilon > 0.0;
  }
  return out;
}

struct TopKSettings {
  int steps = 50;
  double step_fraction = 0.1;
};

/// Classes of one prediction ordered by descending probability, ties broken
/// by ascending class index.
inline std::vector<std::size_t> ranked_classes(std::span<const double> probs) {
  std::vector<std::size_t> idx(probs.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  return idx;
}

/// r^(k) = sum_{c in top-k} w_c r^(k_c), where w_c is the clean probability
/// and r^(k_c) maximizes -log q_c over the eps-ball, found by projected
/// gradient ascent from r = 0. Variant n rows are projected afterwards.
inline Perturbation topk_perturbation(const ActivationRecord& act,
                                      const LinearClassifier& clf, double epsilon,
                                      std::size_t k, Variant variant,
                                      const TopKSettings& settings = {}) {
  const std::size_t C = clf.classes();
  if (k < 1 || k > C) throw std::invalid_argument("topk_perturbation: k out of range");
  const Tensor& base = inner_base(act, variant);
  const std::size_t n = base.rows(), d = base.cols();
  const Tensor log_p = clean_log_probs(act, clf);
  Tensor r(base.shape());
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> p(C);
    for (std::size_t c = 0; c < C; ++c) p[c] = std::exp(log_p.at(i, c));
    const auto order = ranked_classes(p);
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t cls = order[j];
      std::vector<double> onehot(C, 0.0);
      onehot[cls] = 1.0;
      const detail::ClosedForm obj{&clf, base.row(i), onehot};
      const std::vector<double> rc = detail::ascend(
          obj, std::vector<double>(d, 0.0), epsilon,
          {settings.steps, settings.step_fraction * epsilon}, nullptr);
      for (std::size_t c = 0; c < d; ++c) r.at(i, c) += p[cls] * rc[c];
    }
  }
  Perturbation out;
  out.epsilon = epsilon;
  if (variant == Variant::u) {
    out.space = Space::penult_unnormalized;
    out.r = std::move(r);
  } else {
    out.space = Space::penult_normalized;
    out.r = project_perturbation(act.z_norm, r);
    out.projected = true;
  }
  return out;
}

}  // namespace apa
