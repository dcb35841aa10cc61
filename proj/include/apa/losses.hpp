#pragma once

// Target-side losses used during adaptation, and the two stage objectives.
//
// Every loss here is built into the caller's graph from a TargetForward (the
// clean pass over the target batch). Perturbations are computed from values
// and enter the graph as constants.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <map>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "apa/model.hpp"
#include "apa/perturb.hpp"

namespace apa {

struct LossTerm {
  std::string name;
  ad::Var value;  // scalar node
  double weight = 1.0;

  double scalar() const { return value.value()[0]; }
};

/// Per-feature location and scale of a dataset, used to size jitter.
struct FeatureStats {
  std::vector<double> mean;
  std::vector<double> std;

  static FeatureStats of(const Tensor& x) {
    BlockMoments mo = column_moments(x);
    FeatureStats s{mo.mean, mo.var};
    for (double& v : s.std) v = std::sqrt(v);
    return s;
  }
};

struct JitterConfig {
  double weak_sigma = 0.05;
  double strong_sigma = 0.25;
  double mask_rate = 0.2;
};

struct CommitteeConfig {
  std::size_t size = 3;
  /// Noise scale of each committee view, in units of the feature std.
  double noise_scale = 0.25;
  std::size_t history = 256;
  /// A sample is consistent when more than this fraction of views agree with
  /// its clean prediction.
  double majority = 0.5;

  void validate() const {
    if (size < 2) throw std::invalid_argument("committee size must be at least 2");
    if (history < 1) throw std::invalid_argument("committee history must be at least 1");
    if (!(majority >= 0.0 && majority < 1.0))
      throw std::invalid_argument("committee majority must lie in [0, 1)");
  }
};

/// Jittered copy of a batch: x + sigma * std * N(0, 1), then each coordinate
/// is replaced by its feature mean with probability mask_rate. Noise for
/// sample i depends only on (seed, step, id_i, view).
inline Tensor jitter(const Tensor& x, const FeatureStats& stats, double sigma,
                     double mask_rate, std::span<const std::uint64_t> ids,
                     std::uint64_t seed, std::uint64_t step, std::uint64_t view) {
  Tensor out = x;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    std::mt19937_64 rng(derive_seed(seed, step, ids[i], 0x7177e4ULL + view));
    std::normal_distribution<double> N(0.0, 1.0);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    for (std::size_t c = 0; c < x.cols(); ++c) {
      out.at(i, c) += sigma * stats.std[c] * N(rng);
      if (mask_rate > 0.0 && U(rng) < mask_rate) out.at(i, c) = stats.mean[c];
    }
  }
  return out;
}

/// Sliding window over the last Q per-sample predictions.
class PredictionHistory {
 public:
  explicit PredictionHistory(std::size_t capacity = 256) : capacity_(capacity) {}

  void push(const Tensor& probs) {
    for (std::size_t i = 0; i < probs.rows(); ++i) {
      window_.emplace_back(probs.row(i).begin(), probs.row(i).end());
      if (window_.size() > capacity_) window_.pop_front();
    }
  }

  std::vector<double> mean() const {
    if (window_.empty()) return {};
    std::vector<double> m(window_.front().size(), 0.0);
    for (const auto& p : window_)
      for (std::size_t c = 0; c < m.size(); ++c) m[c] += p[c];
    for (double& v : m) v /= static_cast<double>(window_.size());
    return m;
  }

  std::size_t size() const { return window_.size(); }
  std::size_t capacity() const { return capacity_; }
  const std::deque<std::vector<double>>& window() const { return window_; }

 private:
  std::size_t capacity_;
  std::deque<std::vector<double>> window_;
};

// ---------------------------------------------------------------------------
// Clean passes

struct TargetForward {
  ad::Var x;
  ad::Var z;
  ad::Var logits;
  ad::Var log_probs;
};

inline TargetForward forward_batch(const BoundModel& bm, const Tensor& x,
                                   const ForwardOptions& opt) {
  ad::Graph& g = *bm.head_weight.graph;
  TargetForward f;
  f.x = g.constant(x);
  f.z = extract(bm, f.x, opt);
  f.logits = classify(bm, f.z);
  f.log_probs = ad::log_softmax_rows(f.logits, bm.model->head.temperature);
  return f;
}

/// Mean cross-entropy -1/n sum_i log q_i[y_i].
inline ad::Var cross_entropy(ad::Var log_probs, const std::vector<std::size_t>& labels) {
  return ad::scale(ad::mean(ad::pick(log_probs, labels)), -1.0);
}

/// Mean over rows of -sum_c q log q.
inline ad::Var mean_entropy(ad::Var log_probs) {
  ad::Var q = ad::exp(log_probs);
  return ad::scale(ad::mean(ad::row_sum(ad::mul(q, log_probs))), -1.0);
}

// ---------------------------------------------------------------------------
// Adversarial consistency losses

/// How the constant perturbation r meets the activation in the outer loss.
enum class OuterForm {
  unnormalized,       // g(zeta(z + r))
  normalized,         // g(zbar + r)
  renormalized,       // g(zeta(zbar + r))
};

/// Per-row KL( target || softmax(g(perturbed)/T) ) with r constant; `target`
/// is a log-probability node (constant unless the clean distribution is
/// deliberately left attached).
inline ad::Var outer_kl_rows(const BoundModel& bm, ad::Var z, const Tensor& r,
                             OuterForm form, ad::Var target) {
  ad::Graph& g = *z.graph;
  ad::Var rv = g.constant(r);
  ad::Var u;
  switch (form) {
    case OuterForm::unnormalized:
      u = ad::normalize_rows(ad::add(z, rv));
      break;
    case OuterForm::normalized:
      u = ad::add(ad::normalize_rows(z), rv);
      break;
    case OuterForm::renormalized:
      u = ad::normalize_rows(ad::add(ad::normalize_rows(z), rv));
      break;
  }
  ad::Var lq = ad::log_softmax_rows(head_logits(bm, u), bm.model->head.temperature);
  return ad::kl_from_log_probs(target, lq);
}

enum class AdvKind {
  u,              // perturb z
  u_compensated,  // perturb z, loss weighted by ||z + r|| / ||z||
  n,              // perturb zbar, projected
  n_prime,        // perturb zbar, renormalized instead of projected
  n_to_u,         // r_n mapped into z space, un-normalized loss
  u_to_n,         // r_u mapped into zbar space, normalized loss
  topk,           // top-k decomposed perturbation of zbar, projected
};

struct AdversarialOptions {
  PerturbParams params;
  std::uint64_t step = 0;
  std::span<const std::uint64_t> ids;
  /// Treat the clean distribution as a constant.
  bool detach_clean = true;
  std::size_t topk = 1;
  TopKSettings topk_settings;
  OnProbeFailure on_failure = OnProbeFailure::raise;
};

/// The clean log-probabilities as the first KL argument.
inline ad::Var kl_target(const TargetForward& f, bool detach) {
  return detach ? f.z.graph->constant(f.log_probs.value()) : f.log_probs;
}

/// Perturbation used by `kind`, in the space its outer loss consumes.
inline Tensor adversarial_perturbation(const BoundModel& bm, const ActivationRecord& act,
                                       AdvKind kind, const AdversarialOptions& opt) {
  const LinearClassifier& clf = bm.model->head;
  switch (kind) {
    case AdvKind::u:
    case AdvKind::u_compensated:
      return approx_direction(act, clf, opt.params, Variant::u, opt.ids, opt.step,
                              opt.on_failure);
    case AdvKind::n:
      return approx_perturbation(act, clf, opt.params, Variant::n, opt.ids, opt.step,
                                 opt.on_failure)
          .r;
    case AdvKind::n_prime:
      return approx_direction(act, clf, opt.params, Variant::n, opt.ids, opt.step,
                              opt.on_failure);
    case AdvKind::n_to_u:
      return map_norm_unnorm(
                 approx_perturbation(act, clf, opt.params, Variant::n, opt.ids, opt.step,
                                     opt.on_failure),
                 act, MapDirection::n_to_u)
          .r;
    case AdvKind::u_to_n:
      return map_norm_unnorm(
                 approx_perturbation(act, clf, opt.params, Variant::u, opt.ids, opt.step,
                                     opt.on_failure),
                 act, MapDirection::u_to_n)
          .r;
    case AdvKind::topk:
      return topk_perturbation(act, clf, opt.params.epsilon, opt.topk, Variant::n,
                               opt.topk_settings)
          .r;
  }
  throw std::logic_error("unknown adversarial kind");
}

inline OuterForm outer_form(AdvKind kind) {
  switch (kind) {
    case AdvKind::u:
    case AdvKind::u_compensated:
    case AdvKind::n_to_u:
      return OuterForm::unnormalized;
    case AdvKind::n_prime:
      return OuterForm::renormalized;
    default:
      return OuterForm::normalized;
  }
}

inline const char* adv_name(AdvKind kind) {
  switch (kind) {
    case AdvKind::u: return "apa_u";
    case AdvKind::u_compensated: return "apa_u_comp";
    case AdvKind::n: return "apa_n";
    case AdvKind::n_prime: return "apa_n_prime";
    case AdvKind::n_to_u: return "apa_n2u";
    case AdvKind::u_to_n: return "apa_u2n";
    case AdvKind::topk: return "apa_topk";
  }
  return "apa";
}

/// Adversarial loss on penultimate activations: mean over the batch of
/// KL(clean || perturbed). The activation z is fixed inside the argmax; the
/// outer loss differentiates through z with r held constant.
inline LossTerm adversarial_loss(const BoundModel& bm, const TargetForward& f,
                                 AdvKind kind, const AdversarialOptions& opt) {
  const ActivationRecord act = make_activation_record(f.z.value());
  const Tensor r = adversarial_perturbation(bm, act, kind, opt);
  ad::Var kl = outer_kl_rows(bm, f.z, r, outer_form(kind), kl_target(f, opt.detach_clean));
  if (kind == AdvKind::u_compensated) {
    const std::vector<double> w = norm_compensation(act, r);
    kl = ad::mul(kl, f.z.graph->constant(Tensor::vector(w)));
  }
  return {adv_name(kind), ad::mean(kl), 1.0};
}

// ---------------------------------------------------------------------------
// Intermediate-feature perturbation

/// One-step perturbation of f^a(x) at block boundary `split`: the probe
/// gradient runs through f^b and the head, with the model held constant.
inline Tensor intermediate_direction(const Model& m, const Tensor& inter,
                                     std::size_t split, const Tensor& clean_log_p,
                                     const PerturbParams& params, Mode mode,
                                     std::span<const std::uint64_t> ids,
                                     std::uint64_t step,
                                     OnProbeFailure on_failure = OnProbeFailure::raise) {
  params.validate();
  const std::size_t n = inter.rows(), d = inter.cols();
  Tensor r(inter.shape());
  std::vector<std::size_t> pending(n);
  for (std::size_t i = 0; i < n; ++i) pending[i] = i;
  for (int attempt = 0; attempt < kMaxProbeAttempts && !pending.empty(); ++attempt) {
    Tensor probe(inter.shape());
    for (std::size_t i : pending) {
      const std::uint64_t id = ids.empty() ? i : ids[i];
      const auto dir = random_unit(d, derive_seed(params.seed, step, id, 0x1000 + attempt));
      for (std::size_t c = 0; c < d; ++c) probe.at(i, c) = params.xi * dir[c];
    }
    ad::Graph g;
    BoundModel bm = bind(g, m, false);
    ad::Var rv = g.leaf(probe);
    ad::Var z = apply_blocks(bm, ad::add(g.constant(inter), rv), split, m.features.depth(),
                             {mode, nullptr});
    ad::Var lq = ad::log_softmax_rows(classify(bm, z), m.head.temperature);
    g.backward(ad::sum(ad::kl_from_log_probs(g.constant(clean_log_p), lq)));
    const Tensor grad = g.grad(rv);
    std::vector<std::size_t> still;
    for (std::size_t i : pending) {
      const double gn = norm2(grad.row(i));
      if (!(gn > 0.0) || !std::isfinite(gn)) {
        still.push_back(i);
        continue;
      }
      for (std::size_t c = 0; c < d; ++c) r.at(i, c) = params.epsilon * grad.at(i, c) / gn;
    }
    pending = std::move(still);
  }
  if (!pending.empty() && on_failure == OnProbeFailure::raise) {
    throw PerturbationFailure("intermediate perturbation: zero probe gradient for sample " +
                              std::to_string(pending.front()));
  }
  return r;
}

/// Intermediate-feature adversarial loss. With `mapped` false the outer loss
/// runs f^b at f^a(x) + r_i; with `mapped` true the same perturbation is
/// carried to the penultimate layer as r = f^b(f^a(x) + r_i) - f(x) and the
/// outer loss perturbs z directly. Both have the same value.
inline LossTerm intermediate_loss(const BoundModel& bm, const Tensor& x, std::size_t split,
                                  const AdversarialOptions& opt, Mode mode, bool mapped) {
  const Model& m = *bm.model;
  ad::Graph& g = *bm.head_weight.graph;
  const ForwardOptions fo{mode, nullptr};
  ad::Var a = apply_blocks(bm, g.constant(x), 0, split, fo);
  ad::Var z = apply_blocks(bm, a, split, m.features.depth(), fo);
  ad::Var lp = ad::log_softmax_rows(classify(bm, z), m.head.temperature);
  ad::Var target = opt.detach_clean ? g.constant(lp.value()) : lp;
  const Tensor r_i = intermediate_direction(m, a.value(), split, lp.value(), opt.params,
                                            mode, opt.ids, opt.step, opt.on_failure);
  ad::Var z_pert = apply_blocks(bm, ad::add(a, g.constant(r_i)), split,
                                m.features.depth(), fo);
  ad::Var kl;
  if (!mapped) {
    ad::Var lq = ad::log_softmax_rows(classify(bm, z_pert), m.head.temperature);
    kl = ad::kl_from_log_probs(target, lq);
  } else {
    const Tensor r_p = z_pert.value() - z.value();
    kl = outer_kl_rows(bm, z, r_p, OuterForm::unnormalized, target);
  }
  return {mapped ? "apa_i2p" : "apa_i", ad::mean(kl), 1.0};
}

// ---------------------------------------------------------------------------
// VAT

/// One-step input-space perturbation: the probe gradient of
/// KL(clean || h(x + xi d)) runs through the whole network, model constant.
inline Tensor vat_direction(const Model& m, const Tensor& x, const Tensor& clean_log_p,
                            const PerturbParams& params, Mode mode,
                            std::span<const std::uint64_t> ids, std::uint64_t step,
                            OnProbeFailure on_failure = OnProbeFailure::raise) {
  params.validate();
  const std::size_t n = x.rows(), d = x.cols();
  Tensor r(x.shape());
  std::vector<std::size_t> pending(n);
  for (std::size_t i = 0; i < n; ++i) pending[i] = i;
  for (int attempt = 0; attempt < kMaxProbeAttempts && !pending.empty(); ++attempt) {
    Tensor probe(x.shape());
    for (std::size_t i : pending) {
      const std::uint64_t id = ids.empty() ? i : ids[i];
      const auto dir = random_unit(d, derive_seed(params.seed, step, id, 0x2000 + attempt));
      for (std::size_t c = 0; c < d; ++c) probe.at(i, c) = params.xi * dir[c];
    }
    ad::Graph g;
    BoundModel bm = bind(g, m, false);
    ad::Var rv = g.leaf(probe);
    ad::Var z = extract(bm, ad::add(g.constant(x), rv), {mode, nullptr});
    ad::Var lq = ad::log_softmax_rows(classify(bm, z), m.head.temperature);
    g.backward(ad::sum(ad::kl_from_log_probs(g.constant(clean_log_p), lq)));
    const Tensor grad = g.grad(rv);
    std::vector<std::size_t> still;
    for (std::size_t i : pending) {
      const double gn = norm2(grad.row(i));
      if (!(gn > 0.0) || !std::isfinite(gn)) {
        still.push_back(i);
        continue;
      }
      for (std::size_t c = 0; c < d; ++c) r.at(i, c) = params.epsilon * grad.at(i, c) / gn;
    }
    pending = std::move(still);
  }
  if (!pending.empty() && on_failure == OnProbeFailure::raise) {
    throw PerturbationFailure("vat: zero probe gradient for sample " +
                              std::to_string(pending.front()));
  }
  return r;
}

/// Per-row KL(target || h(x + r)) with r constant.
inline ad::Var vat_outer_rows(const BoundModel& bm, ad::Var x, const Tensor& r,
                              ad::Var target, Mode mode) {
  ad::Graph& g = *x.graph;
  ad::Var z = extract(bm, ad::add(x, g.constant(r)), {mode, nullptr});
  ad::Var lq = ad::log_softmax_rows(classify(bm, z), bm.model->head.temperature);
  return ad::kl_from_log_probs(target, lq);
}

/// Input-space virtual adversarial loss.
inline LossTerm vat_loss(const BoundModel& bm, const TargetForward& f,
                         const AdversarialOptions& opt, Mode mode) {
  const Tensor r = vat_direction(*bm.model, f.x.value(), f.log_probs.value(), opt.params,
                                 mode, opt.ids, opt.step, opt.on_failure);
  return {"vat", ad::mean(vat_outer_rows(bm, f.x, r, kl_target(f, opt.detach_clean), mode)),
          1.0};
}

// ---------------------------------------------------------------------------
// Self-training baselines

inline LossTerm ent_loss(const TargetForward& f) {
  return {"ent", mean_entropy(f.log_probs), 1.0};
}

/// Mean entropy plus sum_c pbar_c log pbar_c, pbar the batch-mean prediction.
inline LossTerm mi_loss(const TargetForward& f) {
  ad::Var pbar = ad::col_mean(ad::exp(f.log_probs));
  // The offset keeps log finite for a class no sample predicts; 0 log 0 = 0.
  ad::Var safe = ad::add(pbar, f.z.graph->constant(Tensor(pbar.shape(), 1e-300)));
  ad::Var neg_div = ad::sum(ad::mul(pbar, ad::log(safe)));
  return {"mi", ad::add(mean_entropy(f.log_probs), neg_div), 1.0};
}

struct FixMatchResult {
  LossTerm term;
  std::size_t kept = 0;  // samples passing the confidence gate
};

/// -1/n sum_i 1[max q_i >= tau] log h(A(x_i))[argmax q_i], q from the weak
/// view (constant), A the strong view.
inline FixMatchResult fixmatch_loss(const BoundModel& bm, const Tensor& x, double tau,
                                    const JitterConfig& jc, const FeatureStats& stats,
                                    std::span<const std::uint64_t> ids, std::uint64_t seed,
                                    std::uint64_t step, Mode mode) {
  ad::Graph& g = *bm.head_weight.graph;
  const double T = bm.model->head.temperature;
  const Tensor weak = jitter(x, stats, jc.weak_sigma, 0.0, ids, seed, step, 0);
  const Tensor strong = jitter(x, stats, jc.strong_sigma, jc.mask_rate, ids, seed, step, 1);
  ad::Var lw = ad::log_softmax_rows(classify(bm, extract(bm, g.constant(weak), {mode, nullptr})), T);
  const Tensor& lwv = lw.value();
  std::vector<std::size_t> labels(x.rows());
  Tensor gate({x.rows()});
  FixMatchResult res;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto row = lwv.row(i);
    labels[i] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    if (std::exp(row[labels[i]]) >= tau) {
      gate[i] = 1.0;
      ++res.kept;
    }
  }
  ad::Var ls = ad::log_softmax_rows(classify(bm, extract(bm, g.constant(strong), {mode, nullptr})), T);
  ad::Var picked = ad::mul(ad::pick(ls, labels), g.constant(gate));
  res.term = {"fixmatch", ad::scale(ad::mean(picked), -1.0), 1.0};
  return res;
}

struct SentryResult {
  LossTerm term;
  std::size_t consistent = 0;
};

/// Per-view entropy signs for the committee loss: +1 on one agreeing view of
/// each majority-consistent sample, -1 on one disagreeing view of every other
/// sample, 0 elsewhere. The view is drawn uniformly from (seed, step, id).
inline std::vector<Tensor> sentry_selection(const std::vector<std::vector<bool>>& agrees,
                                            double majority,
                                            std::span<const std::uint64_t> ids,
                                            std::uint64_t seed, std::uint64_t step,
                                            std::size_t* consistent_count = nullptr) {
  const std::size_t n = agrees.size();
  const std::size_t views = n ? agrees.front().size() : 0;
  std::vector<Tensor> sign(views, Tensor({n}));
  std::size_t consistent_total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::size_t> yes, no;
    for (std::size_t v = 0; v < views; ++v) (agrees[i][v] ? yes : no).push_back(v);
    const bool consistent =
        static_cast<double>(yes.size()) > majority * static_cast<double>(views);
    const auto& pool = consistent ? yes : no;
    if (pool.empty()) continue;
    std::mt19937_64 rng(derive_seed(seed, step, ids.empty() ? i : ids[i], 0x5e47));
    const std::size_t pick =
        pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
    sign[pick][i] = consistent ? 1.0 : -1.0;
    if (consistent) ++consistent_total;
  }
  if (consistent_count) *consistent_count = consistent_total;
  return sign;
}

/// Committee-consistency entropy loss plus a diversity term against the
/// running average of recent predictions. For each sample, the views whose
/// argmax agrees with the clean argmax are counted; a majority makes the
/// sample consistent and one agreeing view (chosen uniformly) has its entropy
/// minimized, otherwise one disagreeing view has its entropy maximized. The
/// history receives the batch's clean predictions before the average is read.
inline SentryResult sentry_loss(const BoundModel& bm, const TargetForward& f,
                                const CommitteeConfig& cc, const FeatureStats& stats,
                                PredictionHistory& history, std::span<const std::uint64_t> ids,
                                std::uint64_t seed, std::uint64_t step, Mode mode) {
  cc.validate();
  ad::Graph& g = *bm.head_weight.graph;
  const double T = bm.model->head.temperature;
  const Tensor& x = f.x.value();
  const std::size_t n = x.rows(), C = bm.model->classes();
  auto argmax = [](std::span<const double> r) {
    return static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin());
  };
  std::vector<ad::Var> view_entropy;
  std::vector<std::vector<bool>> agrees(n, std::vector<bool>(cc.size));
  for (std::size_t v = 0; v < cc.size; ++v) {
    const Tensor xv = jitter(x, stats, cc.noise_scale, 0.0, ids, seed, step, 16 + v);
    ad::Var lp = ad::log_softmax_rows(classify(bm, extract(bm, g.constant(xv), {mode, nullptr})), T);
    ad::Var q = ad::exp(lp);
    view_entropy.push_back(ad::scale(ad::row_sum(ad::mul(q, lp)), -1.0));
    for (std::size_t i = 0; i < n; ++i)
      agrees[i][v] = argmax(lp.value().row(i)) == argmax(f.log_probs.value().row(i));
  }
  SentryResult res;
  const std::vector<Tensor> sign =
      sentry_selection(agrees, cc.majority, ids, seed, step, &res.consistent);
  ad::Var total = ad::mean(ad::mul(view_entropy[0], g.constant(sign[0])));
  for (std::size_t v = 1; v < cc.size; ++v)
    total = ad::add(total, ad::mean(ad::mul(view_entropy[v], g.constant(sign[v]))));

  Tensor probs = f.log_probs.value();
  for (double& p : probs.values()) p = std::exp(p);
  history.push(probs);
  std::vector<double> qbar = history.mean();
  Tensor log_qbar({C});
  for (std::size_t c = 0; c < C; ++c) log_qbar[c] = std::log(std::max(qbar[c], 1e-300));
  ad::Var hbar = ad::col_mean(ad::exp(f.log_probs));
  total = ad::add(total, ad::sum(ad::mul(hbar, g.constant(log_qbar))));
  res.term = {"sentry", total, 1.0};
  return res;
}

// ---------------------------------------------------------------------------
// Registry

enum class LossKind {
  none,
  apa_u, apa_u_comp, apa_n, apa_n_prime, apa_n2u, apa_u2n, apa_topk,
  apa_i, apa_i2p,
  vat, ent, mi, fixmatch, sentry,
};

inline const std::map<std::string, LossKind>& loss_registry() {
  static const std::map<std::string, LossKind> reg = {
      {"none", LossKind::none},
      {"apa-u", LossKind::apa_u},
      {"apa-u-comp", LossKind::apa_u_comp},
      {"apa-n", LossKind::apa_n},
      {"apa-n-prime", LossKind::apa_n_prime},
      {"apa-n2u", LossKind::apa_n2u},
      {"apa-u2n", LossKind::apa_u2n},
      {"apa-topk", LossKind::apa_topk},
      {"apa-i", LossKind::apa_i},
      {"apa-i2p", LossKind::apa_i2p},
      {"vat", LossKind::vat},
      {"ent", LossKind::ent},
      {"mi", LossKind::mi},
      {"fixmatch", LossKind::fixmatch},
      {"sentry", LossKind::sentry},
  };
  return reg;
}

inline LossKind parse_loss(const std::string& name) {
  const auto& reg = loss_registry();
  auto it = reg.find(name);
  if (it == reg.end()) throw std::invalid_argument("unknown loss '" + name + "'");
  return it->second;
}

inline std::string loss_name(LossKind k) {
  for (const auto& [name, kind] : loss_registry())
    if (kind == k) return name;
  return "?";
}

/// Hyperparameters of every target loss.
struct LossConfig {
  PerturbParams apa_u{30.0, 10.0, 0};
  PerturbParams apa_n{1.0, 1.0, 0};
  PerturbParams vat{1.0, 1e-6, 0};
  PerturbParams intermediate{1.0, 1.0, 0};
  std::size_t topk = 1;
  double tau = 0.75;
  JitterConfig jitter;
  CommitteeConfig committee;
  bool detach_clean = true;
  /// Rows whose probe gradient never leaves zero (saturated predictions) get
  /// no perturbation and contribute zero loss.
  OnProbeFailure on_failure = OnProbeFailure::zero;
};

/// Mutable per-run state some losses keep between steps.
struct LossState {
  PredictionHistory history{256};
};

struct TargetLossInput {
  const BoundModel* bm = nullptr;
  const TargetForward* f = nullptr;
  std::span<const std::uint64_t> ids;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  Mode mode = Mode::eval;
  const FeatureStats* stats = nullptr;
};

/// Builds the selected target loss into the batch's graph. LossKind::none
/// yields a zero constant with weight 0.
inline LossTerm target_loss(LossKind kind, const LossConfig& cfg, const TargetLossInput& in,
                            LossState& state) {
  const BoundModel& bm = *in.bm;
  const TargetForward& f = *in.f;
  auto adv = [&](PerturbParams p) {
    p.seed = derive_seed(in.seed, 0xad5e);
    AdversarialOptions o{p, in.step, in.ids, cfg.detach_clean, cfg.topk, {}, cfg.on_failure};
    return o;
  };
  switch (kind) {
    case LossKind::none:
      return {"none", f.z.graph->constant(Tensor::scalar(0.0)), 0.0};
    case LossKind::apa_u:
      return adversarial_loss(bm, f, AdvKind::u, adv(cfg.apa_u));
    case LossKind::apa_u_comp:
      return adversarial_loss(bm, f, AdvKind::u_compensated, adv(cfg.apa_u));
    case LossKind::apa_n:
      return adversarial_loss(bm, f, AdvKind::n, adv(cfg.apa_n));
    case LossKind::apa_n_prime:
      return adversarial_loss(bm, f, AdvKind::n_prime, adv(cfg.apa_n));
    case LossKind::apa_n2u:
      return adversarial_loss(bm, f, AdvKind::n_to_u, adv(cfg.apa_n));
    case LossKind::apa_u2n:
      return adversarial_loss(bm, f, AdvKind::u_to_n, adv(cfg.apa_u));
    case LossKind::apa_topk:
      return adversarial_loss(bm, f, AdvKind::topk, adv(cfg.apa_n));
    case LossKind::apa_i:
    case LossKind::apa_i2p:
      return intermediate_loss(bm, f.x.value(), bm.model->features.split_index,
                               adv(cfg.intermediate), in.mode, kind == LossKind::apa_i2p);
    case LossKind::vat:
      return vat_loss(bm, f, adv(cfg.vat), in.mode);
    case LossKind::ent:
      return ent_loss(f);
    case LossKind::mi:
      return mi_loss(f);
    case LossKind::fixmatch:
      return fixmatch_loss(bm, f.x.value(), cfg.tau, cfg.jitter, *in.stats, in.ids, in.seed,
                           in.step, in.mode)
          .term;
    case LossKind::sentry:
      return sentry_loss(bm, f, cfg.committee, *in.stats, state.history, in.ids, in.seed,
                         in.step, in.mode)
          .term;
  }
  throw std::logic_error("unhandled loss kind");
}

// ---------------------------------------------------------------------------
// Stage objectives

struct Objective {
  ad::Var total;
  std::vector<LossTerm> terms;  // unweighted values with their weights
};

/// E ce(source) + beta * E l(target).
inline Objective objective_standard(ad::Var source_log_probs,
                                    const std::vector<std::size_t>& source_labels,
                                    const LossTerm& target_term, double beta) {
  Objective o;
  LossTerm ce{"ce_source", cross_entropy(source_log_probs, source_labels), 1.0};
  o.terms.push_back(ce);
  LossTerm t = target_term;
  t.weight = beta;
  o.terms.push_back(t);
  o.total = beta == 0.0 ? ce.value : ad::add(ce.value, ad::scale(t.value, beta));
  return o;
}

/// Confidence-gated pseudo-label cross-entropy plus beta * l(target). The gate
/// is 1 where the pseudo-label confidence reaches tau; the sum is divided by
/// the batch size.
inline Objective objective_sourcefree(ad::Var target_log_probs,
                                      const std::vector<std::size_t>& pseudo_labels,
                                      const std::vector<double>& confidence, double tau,
                                      const LossTerm& target_term, double beta) {
  ad::Graph& g = *target_log_probs.graph;
  Tensor gate({pseudo_labels.size()});
  for (std::size_t i = 0; i < gate.size(); ++i) gate[i] = confidence[i] >= tau ? 1.0 : 0.0;
  Objective o;
  LossTerm ce{"ce_pseudo",
              ad::scale(ad::mean(ad::mul(ad::pick(target_log_probs, pseudo_labels),
                                         g.constant(gate))),
                        -1.0),
              1.0};
  o.terms.push_back(ce);
  LossTerm t = target_term;
  t.weight = beta;
  o.terms.push_back(t);
  o.total = beta == 0.0 ? ce.value : ad::add(ce.value, ad::scale(t.value, beta));
  return o;
}

}  // namespace apa
