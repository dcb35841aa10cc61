#pragma once

// Self-check suite: gradient checks, loss and gradient identities between
// representation spaces, normalization Jacobian, projection, and (full level)
// comparisons against the ascent oracle.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <nlohmann/json.hpp>
#include <numbers>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "apa/gradcheck.hpp"
#include "apa/losses.hpp"
#include "apa/perturb.hpp"

namespace apa {

struct CheckResult {
  std::string group;
  std::string name;
  /// Worst residual over all instances (or, for rate checks, the rate).
  double measured = 0.0;
  double tolerance = 0.0;
  /// Rate checks pass when measured >= tolerance, residual checks when
  /// measured <= tolerance.
  bool at_least = false;
  std::size_t instances = 0;
  std::string note;

  bool passed() const {
    if (!std::isfinite(measured)) return false;
    return at_least ? measured >= tolerance : measured <= tolerance;
  }
};

struct VerifyScale {
  std::size_t grad_points = 5;
  std::size_t identity_instances = 200;
  std::size_t jacobian_vectors = 200;
  std::size_t projection_instances = 200;
  bool oracle = false;
  std::size_t approx_instances = 500;
  std::size_t grid_instances = 20;

  static VerifyScale fast() { return {}; }
  static VerifyScale full() { return {100, 1000, 1000, 1000, true, 500, 20}; }
};

struct VerifyReport {
  std::string level;
  std::vector<CheckResult> checks;
  double seconds = 0.0;

  bool passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed(); });
  }

  nlohmann::ordered_json to_json(bool with_time = false) const {
    nlohmann::ordered_json j;
    j["level"] = level;
    j["passed"] = passed();
    j["checks"] = nlohmann::ordered_json::array();
    for (const CheckResult& c : checks) {
      nlohmann::ordered_json e;
      e["group"] = c.group;
      e["name"] = c.name;
      e["measured"] = std::isfinite(c.measured) ? nlohmann::ordered_json(c.measured)
                                                : nlohmann::ordered_json(nullptr);
      e["tolerance"] = c.tolerance;
      e["criterion"] = c.at_least ? "measured >= tolerance" : "measured <= tolerance";
      e["instances"] = c.instances;
      e["passed"] = c.passed();
      if (!c.note.empty()) e["note"] = c.note;
      j["checks"].push_back(e);
    }
    if (with_time) j["seconds"] = seconds;
    return j;
  }
};

namespace verify {

// ---------------------------------------------------------------------------
// Random instances

struct HeadInstance {
  ActivationRecord act;
  LinearClassifier clf;
  double epsilon_u = 1.0;
  double epsilon_n = 1.0;
};

/// One sample with d in [2, 16], C in [2, 10], ||z|| spread over three
/// decades, random temperature and budgets.
inline HeadInstance random_head_instance(std::mt19937_64& rng, std::size_t max_d = 16,
                                         std::size_t max_c = 10, std::size_t rows = 1) {
  std::uniform_int_distribution<std::size_t> dd(2, max_d), cc(2, max_c);
  std::normal_distribution<double> N(0.0, 1.0);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  const std::size_t d = dd(rng), C = cc(rng);
  Tensor z({rows, d});
  const double scale = std::pow(10.0, -0.5 + 2.0 * U(rng));
  for (double& v : z.values()) v = std::abs(N(rng)) * scale / std::sqrt(static_cast<double>(d));
  for (std::size_t i = 0; i < rows; ++i) z.at(i, 0) += 1e-3;  // never exactly zero
  HeadInstance h{make_activation_record(z), {}, 0.0, 0.0};
  h.clf.weight = Tensor({C, d});
  for (double& v : h.clf.weight.values()) v = N(rng) / std::sqrt(static_cast<double>(d));
  h.clf.bias = Tensor({C});
  for (double& v : h.clf.bias.values()) v = 0.1 * N(rng);
  h.clf.temperature = std::pow(10.0, -1.5 + 1.5 * U(rng));
  h.epsilon_u = std::pow(10.0, -1.0 + 3.0 * U(rng));
  h.epsilon_n = std::pow(10.0, -1.0 + 1.0 * U(rng));
  return h;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// max |a - b| / max(1, max |b|): absolute for small values, relative above.
inline double scaled_diff(std::span<const double> a, std::span<const double> b) {
  double s = 1.0;
  for (double v : b) s = std::max(s, std::abs(v));
  return max_abs_diff(a, b) / s;
}

/// (I - v v^T / v^T v) / ||v|| applied to g.
inline std::vector<double> jacobian_apply(std::span<const double> v, std::span<const double> g) {
  const double vv = dot(v, v), nv = std::sqrt(vv), vg = dot(v, g);
  std::vector<double> out(v.size());
  for (std::size_t k = 0; k < v.size(); ++k) out[k] = (g[k] - v[k] * vg / vv) / nv;
  return out;
}

/// Gradient of KL(p || softmax((W u + b) / T)) in u: W^T (q - p) / T.
inline std::vector<double> head_gradient_at(const LinearClassifier& clf,
                                            std::span<const double> u,
                                            std::span<const double> log_p) {
  const std::size_t C = clf.classes(), d = u.size();
  std::vector<double> logit(C);
  double mx = -INFINITY;
  for (std::size_t c = 0; c < C; ++c) {
    logit[c] = clf.bias[c];
    for (std::size_t k = 0; k < d; ++k) logit[c] += clf.weight.at(c, k) * u[k];
    logit[c] /= clf.temperature;
    mx = std::max(mx, logit[c]);
  }
  double s = 0.0;
  for (double l : logit) s += std::exp(l - mx);
  std::vector<double> g(d, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    const double diff = (std::exp(logit[c] - mx) / s - std::exp(log_p[c])) / clf.temperature;
    for (std::size_t k = 0; k < d; ++k) g[k] += clf.weight.at(c, k) * diff;
  }
  return g;
}

/// Autodiff gradient in z of the summed outer loss with r constant.
inline Tensor outer_gradient(const LinearClassifier& clf, const Tensor& z, const Tensor& r,
                             OuterForm form, const Tensor& clean_log_p) {
  Model m;
  m.head = clf;
  ad::Graph g;
  BoundModel bm = bind(g, m, false);
  ad::Var zv = g.leaf(z);
  g.backward(ad::sum(outer_kl_rows(bm, zv, r, form, g.constant(clean_log_p))));
  return g.grad(zv);
}

// ---------------------------------------------------------------------------
// Gradient checks

struct GradCase {
  std::string name;
  std::function<Tensor(std::mt19937_64&)> point;
  std::function<ad::ScalarFn(std::mt19937_64&)> make;  // fixed constants per point
};

inline Tensor uniform_tensor(Shape s, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(s));
  for (double& v : t.values()) v = u(rng);
  return t;
}

/// Small network used by the composed-loss checks.
inline ModelShape grad_model_shape() { return {4, {8}, 8, 3}; }

/// Binds `m` with parameter `p` replaced by the graph input.
inline BoundModel bind_with(ad::Graph& g, const Model& m, std::size_t p, ad::Var input) {
  BoundModel bm = bind(g, m, false);
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
  return bm;
}

inline std::vector<GradCase> primitive_cases() {
  using namespace ad;
  auto pt = [](std::mt19937_64& rng) { return uniform_tensor({5, 4}, rng, 0.1, 1.5); };
  auto fixed = [](ScalarFn f) { return [f](std::mt19937_64&) { return f; }; };
  std::vector<GradCase> cs;
  auto add_case = [&](const char* name, ScalarFn f) { cs.push_back({name, pt, fixed(f)}); };
  add_case("add", [](Graph&, Var x) { return sum(mul(add(x, x), x)); });
  add_case("sub", [](Graph& g, Var x) { return sum(mul(sub(x, g.constant(Tensor({5, 4}, 0.3))), x)); });
  add_case("mul", [](Graph&, Var x) { return sum(mul(mul(x, x), x)); });
  add_case("scale", [](Graph&, Var x) { return sum(mul(scale(x, -2.5), x)); });
  add_case("relu", [](Graph& g, Var x) {
    return sum(mul(relu(sub(x, g.constant(Tensor({5, 4}, 0.8)))), x));
  });
  add_case("exp", [](Graph&, Var x) { return mean(exp(x)); });
  add_case("log", [](Graph&, Var x) { return sum(mul(log(x), x)); });
  add_case("sum_mean", [](Graph&, Var x) { return mul(sum(x), mean(mul(x, x))); });
  add_case("row_sum", [](Graph&, Var x) { return sum(mul(row_sum(x), row_sum(x))); });
  add_case("col_mean", [](Graph&, Var x) { return sum(mul(col_mean(x), col_mean(x))); });
  add_case("pick", [](Graph&, Var x) { return sum(exp(pick(x, {0, 3, 1, 2, 0}))); });
  add_case("linear", [](Graph& g, Var x) {
    Var y = linear(x, g.constant(Tensor::matrix(2, 4, {0.1, -0.2, 0.3, 0.4, 0.5, -0.6, 0.7, 0.8})));
    return sum(mul(y, y));
  });
  add_case("add_row", [](Graph& g, Var x) {
    Var y = add_row(x, g.constant(Tensor::vector({1, 2, 3, 4})));
    return sum(mul(y, y));
  });
  add_case("mul_row", [](Graph& g, Var x) {
    return sum(mul(mul_row(x, g.constant(Tensor::vector({1, -2, 3, 0.5}))), x));
  });
  add_case("scale_rows", [](Graph& g, Var x) {
    return sum(mul(scale_rows(x, g.constant(Tensor::vector({0.5, 2.0, -1.0, 1.5, 0.25}))), x));
  });
  add_case("normalize_rows", [](Graph& g, Var x) {
    return sum(mul(normalize_rows(x), g.constant(Tensor({5, 4}, 0.7))));
  });
  add_case("log_softmax", [](Graph&, Var x) { return sum(pick(log_softmax_rows(x, 0.5), {1, 2, 3, 0, 1})); });
  add_case("softmax", [](Graph& g, Var x) {
    Tensor w({5, 4});
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::sin(1.0 + static_cast<double>(i));
    return sum(mul(softmax_rows(x, 0.3), g.constant(w)));
  });
  add_case("kl_rows", [](Graph& g, Var x) {
    return add(sum(kl_rows(g.constant(Tensor({5, 4}, 0.25)), softmax_rows(x, 1.0))),
               sum(kl_rows(softmax_rows(x, 1.0), g.constant(Tensor({5, 4}, 0.25)))));
  });
  add_case("kl_from_log_probs", [](Graph&, Var x) {
    return sum(kl_from_log_probs(log_softmax_rows(x, 0.8), log_softmax_rows(scale(x, -0.5), 0.8)));
  });
  add_case("standardize_cols", [](Graph& g, Var x) {
    Tensor w({5, 4});
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::cos(0.7 * static_cast<double>(i));
    return sum(mul(standardize_cols(x, 1e-5), g.constant(w)));
  });
  return cs;
}

/// Every target loss and both objectives. Stochastic parts (perturbations,
/// jitter, pseudo-labels, committee selection) are drawn once per point and
/// held fixed, as they are constants of the loss being differentiated.
inline std::vector<GradCase> composed_cases() {
  std::vector<GradCase> cs;
  const double T = 0.2;
  const std::size_t C = 3, n = 6, d = 5;

  // Head-level losses, differentiated in z.
  auto zpoint = [=](std::mt19937_64& rng) { return uniform_tensor({n, d}, rng, 0.2, 2.0); };
  auto head_of = [=](std::mt19937_64& rng) {
    LinearClassifier h;
    h.weight = uniform_tensor({C, d}, rng, -1.0, 1.0);
    h.bias = uniform_tensor({C}, rng, -0.2, 0.2);
    h.temperature = T;
    return h;
  };
  auto outer_case = [&](const char* name, OuterForm form, bool compensate) {
    cs.push_back({name, zpoint, [=](std::mt19937_64& rng) -> ad::ScalarFn {
                    Model m;
                    m.head = head_of(rng);
                    const Tensor z0 = zpoint(rng);
                    const ActivationRecord act = make_activation_record(z0);
                    const Tensor clean = clean_log_probs(act, m.head);
                    const Tensor r = uniform_tensor({n, d}, rng, -0.3, 0.3);
                    Tensor w({n});
                    const auto comp = norm_compensation(act, r);
                    for (std::size_t i = 0; i < n; ++i) w[i] = compensate ? comp[i] : 1.0;
                    return [m, clean, r, w, form](ad::Graph& g, ad::Var z) {
                      BoundModel bm = bind(g, m, false);
                      return ad::mean(
                          ad::mul(outer_kl_rows(bm, z, r, form, g.constant(clean)), g.constant(w)));
                    };
                  }});
  };
  outer_case("apa_u", OuterForm::unnormalized, false);
  outer_case("apa_u_compensated", OuterForm::unnormalized, true);
  outer_case("apa_n", OuterForm::normalized, false);
  outer_case("apa_n_prime", OuterForm::renormalized, false);

  auto log_probs_case = [&](const char* name, std::function<ad::Var(const TargetForward&)> f) {
    cs.push_back({name, zpoint, [=](std::mt19937_64& rng) -> ad::ScalarFn {
                    Model m;
                    m.head = head_of(rng);
                    return [m, f](ad::Graph& g, ad::Var z) {
                      BoundModel bm = bind(g, m, false);
                      TargetForward t{z, z, classify(bm, z), {}};
                      t.log_probs = ad::log_softmax_rows(t.logits, m.head.temperature);
                      return f(t);
                    };
                  }});
  };
  log_probs_case("cross_entropy", [](const TargetForward& t) {
    return cross_entropy(t.log_probs, {0, 1, 2, 0, 1, 2});
  });
  log_probs_case("ent", [](const TargetForward& t) { return ent_loss(t).value; });
  log_probs_case("mi", [](const TargetForward& t) { return mi_loss(t).value; });

  // Network-level losses, differentiated in one parameter tensor.
  // The point is the drawn model's own parameter tensor; `last` hands it from
  // the constants factory to the point generator.
  auto param_case = [&](const std::string& name, std::size_t p,
                        std::function<ad::ScalarFn(std::mt19937_64&, const Model&)> build) {
    const ModelShape shape = grad_model_shape();
    auto last = std::make_shared<Model>();
    auto point = [=](std::mt19937_64&) {
      return *last->parameters()[p == SIZE_MAX ? last->head_offset() : p];
    };
    cs.push_back({name, point, [=](std::mt19937_64& rng) {
                    Model m = Model::initialize(shape, rng(), T);
                    // Running statistics away from the defaults.
                    for (DenseBlock& b : m.features.blocks)
                      for (std::size_t c = 0; c < b.out_dim(); ++c) {
                        b.running_mean[c] = 0.1 * std::sin(static_cast<double>(c));
                        b.running_var[c] = 1.0 + 0.2 * std::cos(static_cast<double>(c));
                      }
                    *last = m;
                    return build(rng, m);
                  }});
  };
  const std::size_t head_w = SIZE_MAX;  // resolved to head_offset()
  // Rows are redrawn until their penultimate activation is clearly nonzero in
  // both normalization modes.
  auto batch = [](std::mt19937_64& rng, const Model& m, std::size_t rows) {
    Tensor x({rows, grad_model_shape().input_dim});
    for (std::size_t i = 0; i < rows; ++i) {
      for (int tries = 0;; ++tries) {
        const Tensor cand = uniform_tensor({1, x.cols()}, rng, -2.0, 2.0);
        const Tensor z = forward_split(m, cand, 0).z;
        if (norm2(z.row(0)) > 0.05 || tries > 1000) {
          std::copy_n(cand.row(0).begin(), x.cols(), x.row(i).begin());
          break;
        }
      }
    }
    return x;
  };
  auto train_batch = [](std::mt19937_64& rng, const Model& m, std::size_t rows) {
    Tensor x;
    for (int tries = 0; tries < 1000; ++tries) {
      x = uniform_tensor({rows, grad_model_shape().input_dim}, rng, -2.0, 2.0);
      const Tensor z = forward_split(m, x, 0, Mode::train).z;
      bool live = true;
      for (std::size_t i = 0; i < rows; ++i) live = live && norm2(z.row(i)) > 0.05;
      if (live) break;
    }
    return x;
  };
  auto ids = std::make_shared<std::vector<std::uint64_t>>(std::vector<std::uint64_t>{0, 1, 2, 3, 4, 5});
  auto resolve = [](const Model& m, std::size_t p) { return p == SIZE_MAX ? m.head_offset() : p; };

  for (std::size_t p : {std::size_t{0}, std::size_t{2}, head_w}) {
    const std::string suffix = p == head_w ? "head" : "block" + std::to_string(p);
    param_case("vat/" + suffix, p, [=](std::mt19937_64& rng, const Model& m) -> ad::ScalarFn {
      const Tensor x = batch(rng, m, n);
      const Tensor clean = forward_full(m, x).probs;
      Tensor lp = clean;
      for (double& v : lp.values()) v = std::log(v);
      const Tensor r = vat_direction(m, x, lp, {0.5, 1e-3, rng()}, Mode::eval, *ids, 0,
                                     OnProbeFailure::zero);
      const std::size_t q = resolve(m, p);
      return [m, x, r, lp, q](ad::Graph& g, ad::Var in) {
        BoundModel bm = bind_with(g, m, q, in);
        return ad::mean(vat_outer_rows(bm, g.constant(x), r, g.constant(lp), Mode::eval));
      };
    });
    param_case("apa_i/" + suffix, p, [=](std::mt19937_64& rng, const Model& m) -> ad::ScalarFn {
      const Tensor x = batch(rng, m, n);
      const SplitForward sf = forward_split(m, x, 1);
      const Tensor r_i = uniform_tensor(sf.intermediate.shape(), rng, -0.3, 0.3);
      Tensor lp = forward_full(m, x).probs;
      for (double& v : lp.values()) v = std::log(v);
      const std::size_t q = resolve(m, p);
      return [m, x, r_i, lp, q](ad::Graph& g, ad::Var in) {
        BoundModel bm = bind_with(g, m, q, in);
        ad::Var a = apply_blocks(bm, g.constant(x), 0, 1, {Mode::eval, nullptr});
        ad::Var zp = apply_blocks(bm, ad::add(a, g.constant(r_i)), 1, m.features.depth(),
                                  {Mode::eval, nullptr});
        ad::Var lq = ad::log_softmax_rows(classify(bm, zp), m.head.temperature);
        return ad::mean(ad::kl_from_log_probs(g.constant(lp), lq));
      };
    });
    param_case("fixmatch/" + suffix, p, [=](std::mt19937_64& rng, const Model& m) -> ad::ScalarFn {
      const Tensor x = batch(rng, m, n);
      const FeatureStats st = FeatureStats::of(x);
      const std::uint64_t seed = rng();
      const std::size_t q = resolve(m, p);
      return [m, x, st, seed, q, ids](ad::Graph& g, ad::Var in) {
        BoundModel bm = bind_with(g, m, q, in);
        return fixmatch_loss(bm, x, 0.0, {}, st, *ids, seed, 0, Mode::eval).term.value;
      };
    });
    param_case("sentry/" + suffix, p, [=](std::mt19937_64& rng, const Model& m) -> ad::ScalarFn {
      // The diversity target is detached; its value is pinned at the
      // unperturbed parameters so both sides differentiate the same function.
      const Tensor x = batch(rng, m, n);
      const FeatureStats st = FeatureStats::of(x);
      const std::uint64_t seed = rng();
      const std::size_t q = resolve(m, p);
      PredictionHistory pre(8);
      pre.push(uniform_tensor({3, C}, rng, 0.1, 0.6));
      const Tensor p0 = forward_full(m, x).probs;
      PredictionHistory h0 = pre;
      h0.push(p0);
      const std::vector<double> qbar0 = h0.mean();
      return [m, x, st, seed, q, ids, pre, qbar0](ad::Graph& g, ad::Var in) {
        BoundModel bm = bind_with(g, m, q, in);
        TargetForward f = forward_batch(bm, x, {Mode::eval, nullptr});
        PredictionHistory h = pre;
        ad::Var loss = sentry_loss(bm, f, {}, st, h, *ids, seed, 0, Mode::eval).term.value;
        const std::vector<double> qbar = h.mean();
        Tensor delta({qbar.size()});
        for (std::size_t c = 0; c < qbar.size(); ++c)
          delta[c] = std::log(qbar0[c]) - std::log(qbar[c]);
        ad::Var hbar = ad::col_mean(ad::exp(f.log_probs));
        return ad::add(loss, ad::sum(ad::mul(hbar, g.constant(delta))));
      };
    });
    param_case("objective_standard/" + suffix, p, [=](std::mt19937_64& rng, const Model& m) -> ad::ScalarFn {
      const Tensor xs = train_batch(rng, m, n), xt = batch(rng, m, n);
      std::vector<std::size_t> ys(n);
      for (std::size_t i = 0; i < n; ++i) ys[i] = i % C;
      ad::Graph g0;
      BoundModel b0 = bind(g0, m, false);
      TargetForward f0 = forward_batch(b0, xt, {Mode::eval, nullptr});
      const ActivationRecord act = make_activation_record(f0.z.value());
      const Tensor r = approx_perturbation(act, m.head, {1, 1, rng()}, Variant::n, {}, 0,
                                           OnProbeFailure::zero).r;
      const Tensor target = f0.log_probs.value();
      const std::size_t q = resolve(m, p);
      return [m, xs, xt, ys, r, target, q](ad::Graph& g, ad::Var in) {
        BoundModel bm = bind_with(g, m, q, in);
        TargetForward s = forward_batch(bm, xs, {Mode::train, nullptr});
        TargetForward t = forward_batch(bm, xt, {Mode::eval, nullptr});
        LossTerm adv{"apa_n",
                     ad::mean(outer_kl_rows(bm, t.z, r, OuterForm::normalized, g.constant(target))),
                     1.0};
        return objective_standard(s.log_probs, ys, adv, 0.1).total;
      };
    });
    param_case("objective_sourcefree/" + suffix, p, [=](std::mt19937_64& rng, const Model& m) -> ad::ScalarFn {
      const Tensor xt = batch(rng, m, n);
      std::vector<std::size_t> yhat(n);
      std::vector<double> conf(n);
      std::uniform_real_distribution<double> u(0.5, 1.0);
      for (std::size_t i = 0; i < n; ++i) {
        yhat[i] = (i * 7) % C;
        conf[i] = u(rng);
      }
      ad::Graph g0;
      BoundModel b0 = bind(g0, m, false);
      TargetForward f0 = forward_batch(b0, xt, {Mode::eval, nullptr});
      const ActivationRecord act = make_activation_record(f0.z.value());
      const Tensor r = approx_direction(act, m.head, {30, 10, rng()}, Variant::u, {}, 0,
                                        OnProbeFailure::zero);
      const Tensor target = f0.log_probs.value();
      const std::size_t q = resolve(m, p);
      return [m, xt, yhat, conf, r, target, q](ad::Graph& g, ad::Var in) {
        BoundModel bm = bind_with(g, m, q, in);
        TargetForward t = forward_batch(bm, xt, {Mode::eval, nullptr});
        LossTerm adv{"apa_u",
                     ad::mean(outer_kl_rows(bm, t.z, r, OuterForm::unnormalized, g.constant(target))),
                     1.0};
        return objective_sourcefree(t.log_probs, yhat, conf, 0.75, adv, 0.1).total;
      };
    });
  }
  return cs;
}

/// Runs each case at `points` seeded points; one result per case.
/// True when a failed check at step h passes at h / 10: the stencil crossed a
/// ReLU kink. A wrong gradient disagrees at every step size.
inline bool straddles_kink(const ad::ScalarFn& fn, const Tensor& x, double h, double tol) {
  return ad::finite_diff_check(fn, x, h / 10.0).max_rel_error <= tol;
}

inline std::vector<CheckResult> gradient_checks(const std::vector<GradCase>& cases,
                                                const std::string& group, std::size_t points,
                                                std::uint64_t seed, double tol = 1e-5,
                                                bool coarse_fallback = false) {
  std::vector<CheckResult> out;
  for (std::size_t c = 0; c < cases.size(); ++c) {
    CheckResult res{group, cases[c].name, 0.0, tol, false, points, ""};
    std::mt19937_64 rng(derive_seed(seed, c));
    // A draw that puts an activation row at zero norm has no gradient; it is
    // redrawn and counted, and the check fails if that happens too often.
    // With `coarse_fallback`, a point that fails at h but passes at 10 h is
    // roundoff-limited: the error at 10 h is recorded. A wrong gradient fails
    // at both steps.
    std::size_t done = 0, skipped = 0, kinks = 0, coarse = 0;
    while (done < points && skipped + kinks <= points / 10) {
      try {
        const ad::ScalarFn fn = cases[c].make(rng);
        const Tensor x = cases[c].point(rng);
        double err = ad::finite_diff_check(fn, x, 1e-5).max_rel_error;
        if (err > tol && straddles_kink(fn, x, 1e-5, tol)) {
          ++kinks;
          continue;
        }
        if (err > tol && coarse_fallback) {
          const double e10 = ad::finite_diff_check(fn, x, 1e-4).max_rel_error;
          if (e10 <= tol) err = e10, ++coarse;
        }
        res.measured = std::max(res.measured, err);
        ++done;
      } catch (const DegenerateInput&) {
        ++skipped;
      }
    }
    if (done < points) res.measured = std::numeric_limits<double>::infinity();
    if (skipped || kinks)
      res.note = std::to_string(skipped) + " zero-norm and " + std::to_string(kinks) +
                 " ReLU-kink draws redrawn";
    if (coarse)
      res.note += (res.note.empty() ? "" : "; ") + std::to_string(coarse) +
                  " roundoff-limited points measured at h = 1e-4";
    out.push_back(res);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Identities between spaces

/// Loss, activation and gradient identities under the n->u and u->n maps.
inline std::vector<CheckResult> mapping_checks(std::size_t instances, std::uint64_t seed) {
  CheckResult loss_n2u{"mapping", "loss_u_at_n_to_u_equals_loss_n", 0, 1e-10, false, instances, ""};
  CheckResult loss_u2n{"mapping", "loss_n_at_u_to_n_equals_loss_u", 0, 1e-10, false, instances, ""};
  CheckResult act_n2u{"mapping", "zeta_of_z_plus_n_to_u_equals_zbar_plus_r_n", 0, 1e-12, false, instances, ""};
  CheckResult act_u2n{"mapping", "zbar_plus_u_to_n_equals_zeta_of_z_plus_r_u", 0, 1e-12, false, instances, ""};
  CheckResult g_u{"gradient", "grad_u_is_jacobian_at_z_plus_r_times_head_grad", 0, 1e-9, false, instances, ""};
  CheckResult g_n{"gradient", "grad_n_is_jacobian_at_z_times_head_grad", 0, 1e-9, false, instances, ""};
  CheckResult g_n2u{"gradient", "mapped_grad_u_uses_head_grad_of_n", 0, 1e-9, false, instances, ""};
  CheckResult g_u2n{"gradient", "mapped_grad_n_uses_head_grad_of_u", 0, 1e-9, false, instances, ""};
  std::mt19937_64 rng(seed);
  for (std::size_t k = 0; k < instances; ++k) {
    HeadInstance h = random_head_instance(rng);
    const std::uint64_t s = rng();
    const Perturbation rn = approx_perturbation(h.act, h.clf, {h.epsilon_n, 1.0, s}, Variant::n,
                                                {}, 0, OnProbeFailure::zero);
    const Perturbation ru = approx_perturbation(h.act, h.clf, {h.epsilon_u, 10.0, s}, Variant::u,
                                                {}, 0, OnProbeFailure::zero);
    const Perturbation n2u = map_norm_unnorm(rn, h.act, MapDirection::n_to_u);
    const Perturbation u2n = map_norm_unnorm(ru, h.act, MapDirection::u_to_n);
    const auto ln = loss_pn(h.act, h.clf, rn.r), lu = loss_pu(h.act, h.clf, ru.r);
    loss_n2u.measured = std::max(loss_n2u.measured, max_abs_diff(loss_pu(h.act, h.clf, n2u.r), ln));
    loss_u2n.measured = std::max(loss_u2n.measured, max_abs_diff(loss_pn(h.act, h.clf, u2n.r), lu));

    const Tensor clean = clean_log_probs(h.act, h.clf);
    const Tensor gu = outer_gradient(h.clf, h.act.z, ru.r, OuterForm::unnormalized, clean);
    const Tensor gn = outer_gradient(h.clf, h.act.z, rn.r, OuterForm::normalized, clean);
    const Tensor gn2u = outer_gradient(h.clf, h.act.z, n2u.r, OuterForm::unnormalized, clean);
    const Tensor gu2n = outer_gradient(h.clf, h.act.z, u2n.r, OuterForm::normalized, clean);
    for (std::size_t i = 0; i < h.act.z.rows(); ++i) {
      const std::size_t d = h.act.z.cols();
      std::vector<double> su(d), sn(d), sn2u(d), zu2n(d), zr(d), zr2(d);
      for (std::size_t c = 0; c < d; ++c) {
        zr[c] = h.act.z.at(i, c) + ru.r.at(i, c);
        zr2[c] = h.act.z.at(i, c) + n2u.r.at(i, c);
        sn[c] = h.act.z_norm.at(i, c) + rn.r.at(i, c);
        zu2n[c] = h.act.z_norm.at(i, c) + u2n.r.at(i, c);
      }
      su = normalized(zr);
      sn2u = normalized(zr2);
      act_n2u.measured = std::max(act_n2u.measured, max_abs_diff(sn2u, sn));
      act_u2n.measured = std::max(act_u2n.measured, max_abs_diff(zu2n, su));
      // Head gradients at the perturbed unit activations.
      const auto hu = head_gradient_at(h.clf, su, clean.row(i));
      const auto hn = head_gradient_at(h.clf, sn, clean.row(i));
      const auto z = h.act.z.row(i);
      g_u.measured = std::max(g_u.measured, scaled_diff(gu.row(i), jacobian_apply(zr, hu)));
      g_n.measured = std::max(g_n.measured, scaled_diff(gn.row(i), jacobian_apply(z, hn)));
      g_n2u.measured = std::max(g_n2u.measured, scaled_diff(gn2u.row(i), jacobian_apply(zr2, hn)));
      g_u2n.measured = std::max(g_u2n.measured, scaled_diff(gu2n.row(i), jacobian_apply(z, hu)));
    }
  }
  return {loss_n2u, loss_u2n, act_n2u, act_u2n, g_u, g_n, g_n2u, g_u2n};
}

/// Intermediate-feature loss equals its penultimate-mapped counterpart.
inline CheckResult intermediate_mapping_check(std::size_t instances, std::uint64_t seed) {
  CheckResult res{"mapping", "loss_intermediate_equals_mapped_penultimate", 0, 1e-10, false,
                  instances, ""};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> N(0.0, 1.0);
  const std::size_t rows = 4;
  std::vector<std::uint64_t> ids(rows);
  std::iota(ids.begin(), ids.end(), std::uint64_t{0});
  for (std::size_t k = 0; k < instances; ++k) {
    const Model m = Model::initialize({}, rng(), 0.05);
    Tensor x({rows, m.input_dim()});
    for (double& v : x.values()) v = 2.0 * N(rng);
    const std::size_t split = 1 + rng() % (m.features.depth() - 1);
    const AdversarialOptions opt{{std::pow(10.0, -1.0 + 2.0 * (rng() % 1000) / 1000.0), 1.0, rng()},
                                 0, ids, true, 1, {}, OnProbeFailure::zero};
    double v[2];
    for (bool mapped : {false, true}) {
      ad::Graph g;
      BoundModel bm = bind(g, m, false);
      v[mapped] = intermediate_loss(bm, x, split, opt, Mode::eval, mapped).scalar();
    }
    res.measured = std::max(res.measured, std::abs(v[0] - v[1]));
  }
  return res;
}

/// J v = 0 and agreement of the backward pass with the closed form.
inline std::vector<CheckResult> jacobian_checks(std::size_t vectors, std::uint64_t seed) {
  CheckResult null{"jacobian", "normalize_jacobian_annihilates_input", 0, 1e-12, false, vectors, ""};
  CheckResult form{"jacobian", "normalize_jacobian_matches_closed_form", 0, 1e-10, false, vectors, ""};
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> dd(2, 16);
  std::normal_distribution<double> N(0.0, 1.0);
  std::uniform_real_distribution<double> U(-1.0, 2.0);
  for (std::size_t k = 0; k < vectors; ++k) {
    const std::size_t d = dd(rng);
    Tensor v({d});
    const double s = std::pow(10.0, U(rng));
    for (double& e : v.values()) e = s * N(rng);
    const double nv = norm2(v);
    // Row j of J by backpropagating e_j; J is symmetric.
    for (std::size_t j = 0; j <= d; ++j) {
      ad::Graph g;
      ad::Var x = g.leaf(v);
      Tensor up({d});
      if (j < d) up[j] = 1.0;
      else up = v;  // J v
      g.backward(ad::sum(ad::mul(ad::normalize_rows(x), g.constant(up))));
      const Tensor row = g.grad(x);
      if (j == d) {
        // Scale-free: compare J v against ||v|| / ||v||, i.e. 1.
        null.measured = std::max(null.measured, norm2(row));
        continue;
      }
      for (std::size_t c = 0; c < d; ++c) {
        const double closed = ((j == c ? 1.0 : 0.0) - v[j] * v[c] / (nv * nv)) / nv;
        form.measured = std::max(form.measured, std::abs(row[c] - closed) * nv);
      }
    }
  }
  form.note = "residual scaled by ||v||";
  null.note = "||J v|| in absolute terms";
  return {null, form};
}

/// ||zbar + P(r)|| = 1 and P(P(r)) = P(r).
inline std::vector<CheckResult> projection_checks(std::size_t instances, std::uint64_t seed) {
  CheckResult unit{"projection", "projected_activation_has_unit_norm", 0, 1e-9, false, instances, ""};
  CheckResult idem{"projection", "projection_is_idempotent", 0, 1e-12, false, instances, ""};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> N(0.0, 1.0);
  std::uniform_real_distribution<double> U(-2.0, 1.0);
  for (std::size_t k = 0; k < instances; ++k) {
    HeadInstance h = random_head_instance(rng, 16, 10, 3);
    Tensor r(h.act.z.shape());
    const double eps = std::pow(10.0, U(rng));
    for (std::size_t i = 0; i < r.rows(); ++i) {
      const auto u = random_unit(r.cols(), rng());
      for (std::size_t c = 0; c < r.cols(); ++c) r.at(i, c) = eps * u[c];
    }
    const Tensor p = project_perturbation(h.act.z_norm, r);
    const Tensor pp = project_perturbation(h.act.z_norm, p);
    for (std::size_t i = 0; i < p.rows(); ++i) {
      std::vector<double> s(p.cols());
      for (std::size_t c = 0; c < s.size(); ++c) s[c] = h.act.z_norm.at(i, c) + p.at(i, c);
      unit.measured = std::max(unit.measured, std::abs(norm2(s) - 1.0));
    }
    idem.measured = std::max(idem.measured, max_abs_diff(pp.values(), p.values()));
  }
  return {unit, idem};
}

// ---------------------------------------------------------------------------
// Oracle comparisons

/// Fraction of instances where the one-step perturbation reaches at least half
/// of the oracle's inner objective (un-normalized variant, d <= 16, C <= 10).
inline CheckResult approximation_check(std::size_t instances, std::uint64_t seed,
                                       double min_rate = 0.9) {
  CheckResult res{"oracle", "one_step_reaches_half_of_oracle_kl", 0, min_rate, true, instances, ""};
  std::mt19937_64 rng(seed);
  std::size_t good = 0;
  for (std::size_t k = 0; k < instances; ++k) {
    HeadInstance h = random_head_instance(rng);
    const double eps = h.epsilon_u;
    const Perturbation a = approx_perturbation(h.act, h.clf, {eps, 10.0, rng()}, Variant::u,
                                               {}, 0, OnProbeFailure::zero);
    const Perturbation o = oracle_perturbation(h.act, h.clf, eps, Variant::u);
    const double ka = inner_objective(h.act, h.clf, a.r, Variant::u)[0];
    const double ko = inner_objective(h.act, h.clf, o.r, Variant::u)[0];
    if (ka >= 0.5 * ko) ++good;
  }
  res.measured = static_cast<double>(good) / static_cast<double>(instances);
  res.note = "rate of instances; eps log-uniform in [0.1, 100], xi = 10";
  return res;
}

/// Oracle inner objective against a dense angular search at d = 2, C = 2.
inline CheckResult grid_search_check(std::size_t instances, std::uint64_t seed) {
  CheckResult res{"oracle", "oracle_matches_grid_search_in_2d", 0, 1e-6, false, instances, ""};
  std::mt19937_64 rng(seed);
  for (std::size_t k = 0; k < instances; ++k) {
    HeadInstance h = random_head_instance(rng, 2, 2);
    const double eps = h.epsilon_u;
    auto at = [&](double t) {
      Tensor r = Tensor::matrix(1, 2, {eps * std::cos(t), eps * std::sin(t)});
      return inner_objective(h.act, h.clf, r, Variant::u)[0];
    };
    const double step = std::numbers::pi / 1800.0;
    double best = -1.0, best_t = 0.0;
    for (int j = 0; j < 3600; ++j) {
      const double v = at(j * step);
      if (v > best) best = v, best_t = j * step;
    }
    double lo = best_t - step, hi = best_t + step;
    const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
    for (int it = 0; it < 100; ++it) {
      const double a = hi - phi * (hi - lo), b = lo + phi * (hi - lo);
      if (at(a) > at(b)) hi = b;
      else lo = a;
    }
    best = std::max(best, at(0.5 * (lo + hi)));
    const Perturbation o = oracle_perturbation(h.act, h.clf, eps, Variant::u);
    const double ko = inner_objective(h.act, h.clf, o.r, Variant::u)[0];
    res.measured = std::max(res.measured, std::abs(best - ko));
  }
  res.note = "|circle grid maximum - oracle value|";
  return res;
}

}  // namespace verify

inline VerifyReport run_verify(const std::string& level, std::uint64_t seed = 7) {
  VerifyScale s;
  if (level == "fast") s = VerifyScale::fast();
  else if (level == "full") s = VerifyScale::full();
  else throw std::invalid_argument("unknown verify level '" + level + "' (fast, full)");
  const auto t0 = std::chrono::steady_clock::now();
  VerifyReport rep;
  rep.level = level;
  auto append = [&rep](std::vector<CheckResult> v) {
    rep.checks.insert(rep.checks.end(), v.begin(), v.end());
  };
  append(verify::gradient_checks(verify::primitive_cases(), "autodiff", s.grad_points,
                                 derive_seed(seed, 1)));
  append(verify::gradient_checks(verify::composed_cases(), "losses", s.grad_points,
                                 derive_seed(seed, 2), 1e-5, true));
  append(verify::mapping_checks(s.identity_instances, derive_seed(seed, 3)));
  rep.checks.push_back(
      verify::intermediate_mapping_check(s.identity_instances / 10 + 1, derive_seed(seed, 4)));
  append(verify::jacobian_checks(s.jacobian_vectors, derive_seed(seed, 5)));
  append(verify::projection_checks(s.projection_instances, derive_seed(seed, 6)));
  if (s.oracle) {
    rep.checks.push_back(verify::approximation_check(s.approx_instances, derive_seed(seed, 7)));
    rep.checks.push_back(verify::grid_search_check(s.grid_instances, derive_seed(seed, 8)));
  }
  rep.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace apa
