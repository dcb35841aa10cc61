#pragma once

// Two-stage pipeline: source training, then adaptation with or without
// access to the source set.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "apa/data.hpp"
#include "apa/losses.hpp"
#include "apa/model.hpp"
#include "apa/optim.hpp"

namespace apa {

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Setting { standard, source_free };

struct AdaptConfig {
  ModelShape shape;
  double temperature = 0.05;
  double beta = 0.1;
  double tau = 0.75;
  double source_lr = 1e-3;
  LrSchedule schedule;
  SgdConfig sgd;
  std::size_t batch_size = 16;
  std::size_t source_steps = 2000;
  std::size_t adapt_steps = 4000;
  std::size_t refresh_interval = 100;
  std::size_t eval_interval = 50;
  LossKind loss = LossKind::apa_n;
  LossConfig losses;
  bool freeze_classifier = false;
  /// Target batches normalized with their own statistics instead of the
  /// running ones.
  bool target_batch_stats = false;
  double divergence_limit = 1e3;
  /// Soft floor for the classifier drift cosine, reported in summaries.
  double drift_threshold = 0.9;
  std::uint64_t seed = 1;

  void validate() const {
    auto positive = [](double v, const char* name) {
      if (!(v > 0.0) || !std::isfinite(v))
        throw std::invalid_argument(std::string(name) + " must be positive");
    };
    positive(temperature, "temperature");
    positive(source_lr, "source_lr");
    positive(schedule.eta0, "eta0");
    positive(divergence_limit, "divergence_limit");
    if (beta < 0.0) throw std::invalid_argument("beta must be non-negative");
    if (tau < 0.0 || tau > 1.0) throw std::invalid_argument("tau must be in [0, 1]");
    if (schedule.gamma < 0.0 || schedule.power < 0.0)
      throw std::invalid_argument("lr schedule coefficients must be non-negative");
    if (sgd.momentum < 0.0 || sgd.momentum >= 1.0)
      throw std::invalid_argument("momentum must be in [0, 1)");
    if (sgd.weight_decay < 0.0) throw std::invalid_argument("weight_decay must be non-negative");
    if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
    if (eval_interval == 0) throw std::invalid_argument("eval_interval must be positive");
    if (refresh_interval == 0) throw std::invalid_argument("refresh_interval must be positive");
    losses.apa_u.validate();
    losses.apa_n.validate();
    losses.vat.validate();
    losses.intermediate.validate();
    losses.committee.validate();
    if (losses.topk == 0 || losses.topk > shape.classes)
      throw std::invalid_argument("topk must be in [1, classes]");
  }
};

struct RunRecord {
  std::uint64_t step = 0;
  std::string stage;
  /// Objective parts averaged over the steps since the previous record.
  double loss_total = 0.0;
  double loss_ce = 0.0;
  double loss_target = 0.0;
  double source_acc = std::numeric_limits<double>::quiet_NaN();
  double target_acc = std::numeric_limits<double>::quiet_NaN();
  double target_class_acc = std::numeric_limits<double>::quiet_NaN();
  double lr = 0.0;
  double drift = std::numeric_limits<double>::quiet_NaN();
  std::map<std::string, double> probes;
};

struct EvalResult {
  double accuracy = 0.0;        // percent
  double class_average = 0.0;   // percent, over classes present in the labels
  std::vector<double> per_class;
};

inline EvalResult evaluate(const Model& m, const Dataset& d) {
  const Tensor p = predict_probs(m, d.x);
  const std::size_t C = m.classes();
  std::vector<std::size_t> hit(C, 0), total(C, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    auto row = p.row(i);
    const auto pred = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    const std::size_t y = d.labels[i];
    if (y >= C) throw std::out_of_range("evaluate: label exceeds class count");
    ++total[y];
    if (pred == y) {
      ++hit[y];
      ++correct;
    }
  }
  EvalResult r;
  r.per_class.assign(C, std::numeric_limits<double>::quiet_NaN());
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < C; ++c) {
    if (total[c] == 0) continue;
    r.per_class[c] = 100.0 * static_cast<double>(hit[c]) / static_cast<double>(total[c]);
    sum += r.per_class[c];
    ++present;
  }
  r.accuracy = d.size() ? 100.0 * static_cast<double>(correct) / static_cast<double>(d.size()) : 0.0;
  r.class_average = present ? sum / static_cast<double>(present) : 0.0;
  return r;
}

namespace detail {

inline std::vector<std::uint64_t> to_ids(const std::vector<std::size_t>& idx) {
  return {idx.begin(), idx.end()};
}

inline std::vector<std::size_t> pick_labels(const std::vector<std::size_t>& labels,
                                            const std::vector<std::size_t>& idx) {
  std::vector<std::size_t> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(labels[i]);
  return out;
}

inline void check_loss(double v, double limit, std::uint64_t step, const char* stage) {
  if (!std::isfinite(v) || v > limit)
    throw TrainingDiverged(std::string(stage) + " step " + std::to_string(step) +
                           ": loss " + std::to_string(v) + " exceeds divergence limit");
}

/// Mean of the accumulated objective parts, reset after reading.
struct LossMeter {
  double total = 0.0, ce = 0.0, target = 0.0;
  std::size_t n = 0;

  void add(const Objective& o) {
    total += o.total.value()[0];
    ce += o.terms[0].scalar();
    if (o.terms.size() > 1) target += o.terms[1].scalar();
    ++n;
  }
  void flush(RunRecord& r) {
    const double k = n ? 1.0 / static_cast<double>(n) : 0.0;
    r.loss_total = total * k;
    r.loss_ce = ce * k;
    r.loss_target = target * k;
    *this = {};
  }
};

inline bool record_due(std::size_t done, std::size_t total, std::size_t interval) {
  return done % interval == 0 || done == total;
}

/// Drops rows of the batch whose penultimate activation is identically zero
/// (no direction to normalize). In train mode the batch statistics change
/// with the batch, so the check repeats until it is stable.
inline std::vector<std::size_t> live_rows(const Model& m, const Tensor& x,
                                          std::vector<std::size_t> idx, Mode mode) {
  for (int round = 0; round < 4 && !idx.empty(); ++round) {
    ad::Graph g;
    BoundModel bm = bind(g, m, false);
    const Tensor z = extract(bm, g.constant(gather_rows(x, idx)), {mode, nullptr}).value();
    std::vector<std::size_t> kept;
    for (std::size_t i = 0; i < idx.size(); ++i)
      if (norm2(z.row(i)) > 0.0) kept.push_back(idx[i]);
    if (kept.size() == idx.size()) return idx;
    idx = std::move(kept);
    if (mode == Mode::eval) return idx;
  }
  return {};
}

inline std::vector<Tensor> gradients(const ad::Graph& g, const BoundModel& bm) {
  std::vector<Tensor> out;
  out.reserve(bm.params.size());
  for (const ad::Var& p : bm.params) out.push_back(g.grad(p));
  return out;
}

}  // namespace detail

struct SourceResult {
  Model model;
  /// Classifier weight at the end of the stage.
  Tensor w0;
  std::vector<RunRecord> records;
};

inline Model initial_model(const AdaptConfig& cfg) {
  return Model::initialize(cfg.shape, derive_seed(cfg.seed, 0x30de1), cfg.temperature);
}

/// Cross-entropy training on class-balanced source batches at a fixed rate.
/// `target` is only evaluated for the records.
inline SourceResult run_source_stage(const AdaptConfig& cfg, const Dataset& source,
                                     const Dataset* target = nullptr) {
  cfg.validate();
  if (source.x.cols() != cfg.shape.input_dim)
    throw DimensionMismatch("source set has " + std::to_string(source.x.cols()) +
                            " features, model expects " + std::to_string(cfg.shape.input_dim));
  SourceResult res{initial_model(cfg), {}, {}};
  Model& m = res.model;
  BalancedSampler sampler(source.labels, cfg.shape.classes, cfg.batch_size,
                          derive_seed(cfg.seed, 0x5a3b1e, 0));
  SgdState opt;
  detail::LossMeter meter;
  for (std::size_t i = 0; i < cfg.source_steps; ++i) {
    const auto idx = detail::live_rows(m, source.x, sampler.next(), Mode::train);
    if (idx.size() < 2) continue;
    ad::Graph g;
    BoundModel bm = bind(g, m, true);
    std::vector<BlockMoments> moments;
    TargetForward f = forward_batch(bm, gather_rows(source.x, idx), {Mode::train, &moments});
    Objective o;
    o.terms.push_back({"ce_source", cross_entropy(f.log_probs, detail::pick_labels(source.labels, idx)), 1.0});
    o.total = o.terms[0].value;
    detail::check_loss(o.total.value()[0], cfg.divergence_limit, i, "source");
    g.backward(o.total);
    sgd_step(m.parameters(), detail::gradients(g, bm), opt, cfg.source_lr, cfg.sgd);
    update_running_stats(m, moments);
    meter.add(o);
    if (detail::record_due(i + 1, cfg.source_steps, cfg.eval_interval)) {
      RunRecord r;
      r.step = i + 1;
      r.stage = "source";
      r.lr = cfg.source_lr;
      meter.flush(r);
      r.source_acc = evaluate(m, source).accuracy;
      if (target) {
        const EvalResult e = evaluate(m, *target);
        r.target_acc = e.accuracy;
        r.target_class_acc = e.class_average;
      }
      res.records.push_back(std::move(r));
    }
  }
  res.w0 = m.head.weight;
  return res;
}

/// Called at every record step with the live model; returned entries are
/// stored in RunRecord::probes. Must not modify the model.
using ProbeHook = std::function<std::map<std::string, double>(std::uint64_t, const Model&)>;

struct AdaptResult {
  Model model;
  std::vector<RunRecord> records;
  /// Batch rows left out because their penultimate activation was zero.
  std::size_t dropped_rows = 0;
  /// Steps skipped because too few rows were left.
  std::size_t skipped_steps = 0;
  double min_drift = 1.0;
  /// Pseudo classes left out of balancing at the last refresh.
  std::vector<std::size_t> skipped_classes;
};

/// Adaptation from a source-trained model. The standard setting minimizes
/// source CE + beta * l(target); the source-free setting replaces source CE
/// with the confidence-gated pseudo-label CE. Target batches are balanced
/// over pseudo classes refreshed every `refresh_interval` steps.
inline AdaptResult run_adapt_stage(const AdaptConfig& cfg, Model model, const Dataset* source,
                                   const Dataset& target, Setting setting,
                                   const ProbeHook& probe = {}) {
  cfg.validate();
  if (setting == Setting::standard && !source)
    throw std::invalid_argument("standard adaptation needs the source set");
  if (target.x.cols() != model.input_dim())
    throw DimensionMismatch("target set width does not match the model");
  AdaptResult res;
  res.model = std::move(model);
  Model& m = res.model;
  const Tensor w0 = m.head.weight;
  const std::size_t C = m.classes();
  const Mode target_mode = cfg.target_batch_stats ? Mode::train : Mode::eval;
  const FeatureStats stats = FeatureStats::of(target.x);
  const LossKind kind = cfg.beta == 0.0 ? LossKind::none : cfg.loss;
  LossState state{PredictionHistory(cfg.losses.committee.history)};

  PseudoLabelTable table = refresh_pseudo_labels(m, target.x, 0);
  BalancedSampler tsampler(table.label, C, cfg.batch_size, derive_seed(cfg.seed, 0x7a3b1e, 1));
  std::optional<BalancedSampler> ssampler;
  if (setting == Setting::standard)
    ssampler.emplace(source->labels, C, cfg.batch_size, derive_seed(cfg.seed, 0x5a3b1e, 1));

  std::vector<bool> skip;
  if (cfg.freeze_classifier) {
    skip.assign(m.parameters().size(), false);
    for (std::size_t k = m.head_offset(); k < skip.size(); ++k) skip[k] = true;
  }
  SgdState opt;
  detail::LossMeter meter;
  for (std::size_t i = 0; i < cfg.adapt_steps; ++i) {
    if (i > 0 && refresh_due(i, cfg.refresh_interval)) {
      table = refresh_pseudo_labels(m, target.x, i);
      tsampler.update_labels(table.label, C);
    }
    const double lr = lr_at(i, cfg.schedule);
    const auto tdraw = tsampler.next();
    const auto sdraw = ssampler ? ssampler->next() : std::vector<std::size_t>{};
    const auto tidx = detail::live_rows(m, target.x, tdraw, target_mode);
    const auto sidx = ssampler ? detail::live_rows(m, source->x, sdraw, Mode::train) : sdraw;
    res.dropped_rows += tdraw.size() - tidx.size() + sdraw.size() - sidx.size();
    if (tidx.size() < 2 || (ssampler && sidx.size() < 2)) {
      ++res.skipped_steps;
    } else {
      try {
        const auto ids = detail::to_ids(tidx);
        ad::Graph g;
        BoundModel bm = bind(g, m, true);
        std::vector<BlockMoments> moments;
        Objective o;
        std::vector<BlockMoments>* target_moments =
            setting == Setting::source_free && cfg.target_batch_stats ? &moments : nullptr;
        TargetForward ft;
        if (setting == Setting::standard) {
          TargetForward fs =
              forward_batch(bm, gather_rows(source->x, sidx), {Mode::train, &moments});
          ft = forward_batch(bm, gather_rows(target.x, tidx), {target_mode, target_moments});
          const LossTerm term = target_loss(kind, cfg.losses,
                                            {&bm, &ft, ids, cfg.seed, i, target_mode, &stats}, state);
          o = objective_standard(fs.log_probs, detail::pick_labels(source->labels, sidx), term,
                                 cfg.beta);
        } else {
          ft = forward_batch(bm, gather_rows(target.x, tidx), {target_mode, target_moments});
          const LossTerm term = target_loss(kind, cfg.losses,
                                            {&bm, &ft, ids, cfg.seed, i, target_mode, &stats}, state);
          std::vector<double> conf;
          for (std::size_t t : tidx) conf.push_back(table.confidence[t]);
          o = objective_sourcefree(ft.log_probs, detail::pick_labels(table.label, tidx), conf,
                                   cfg.tau, term, cfg.beta);
        }
        detail::check_loss(o.total.value()[0], cfg.divergence_limit, i, "adapt");
        g.backward(o.total);
        sgd_step(m.parameters(), detail::gradients(g, bm), opt, lr, cfg.sgd, skip);
        update_running_stats(m, moments);
        meter.add(o);
      } catch (const DegenerateInput&) {
        ++res.skipped_steps;
      }
    }
    if (detail::record_due(i + 1, cfg.adapt_steps, cfg.eval_interval)) {
      RunRecord r;
      r.step = i + 1;
      r.stage = setting == Setting::standard ? "adapt" : "adapt-sf";
      r.lr = lr;
      meter.flush(r);
      if (source) r.source_acc = evaluate(m, *source).accuracy;
      const EvalResult e = evaluate(m, target);
      r.target_acc = e.accuracy;
      r.target_class_acc = e.class_average;
      r.drift = classifier_drift(w0, m.head.weight).mean_cosine;
      res.min_drift = std::min(res.min_drift, r.drift);
      if (probe) r.probes = probe(r.step, m);
      res.records.push_back(std::move(r));
    }
  }
  res.skipped_classes = tsampler.skipped_classes();
  return res;
}

}  // namespace apa
