// Command-line front end: gen-data, train, sweep, probe, verify.
//
// Every command writes into <root>/<subdir>/ and echoes the effective config
// there as config.json. stdout carries progress only; machine-readable data
// goes to files. Exit codes: 0 ok, 1 verification failure, 2 missing
// artifact, 3 config or usage error.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "apa/analysis.hpp"
#include "apa/config.hpp"
#include "apa/report.hpp"
#include "apa/verify.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr int kOk = 0;
constexpr int kVerifyFailed = 1;
constexpr int kMissing = 2;
constexpr int kConfigError = 3;

class MissingArtifact : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::string config_path;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool force = false;
  std::size_t jobs = std::max(1u, std::thread::hardware_concurrency());
};

struct Context {
  apa::RunConfig cfg;
  fs::path root;
  bool force = false;
  std::size_t jobs = 1;
};

Context make_context(const Globals& g) {
  Context c;
  c.cfg = g.config_path.empty() ? apa::default_run_config() : apa::load_run_config(g.config_path);
  if (g.seed) {
    c.cfg.train.seed = c.cfg.task.seed = *g.seed;
    apa::validate_run_config(c.cfg);
  }
  if (!g.out.empty()) {
    c.root = g.out;
  } else if (!c.cfg.output_dir.empty()) {
    c.root = c.cfg.output_dir;
  } else if (const char* env = std::getenv("APA_OUTPUT_ROOT"); env && *env) {
    c.root = env;
  } else {
    c.root = "runs";
  }
  c.force = g.force;
  c.jobs = g.jobs;
  return c;
}

/// Creates <root>/<name>. An existing non-empty directory is an error unless
/// --force, which clears it first.
fs::path output_dir(const Context& c, const std::string& name) {
  const fs::path dir = c.root / name;
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!c.force)
      throw UsageError("output directory " + dir.string() +
                       " already has files; pass --force to overwrite");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
  return dir;
}

void echo_config(const Context& c, const fs::path& dir, const json& command) {
  json j;
  j["command"] = command;
  j["config"] = apa::run_config_to_json(c.cfg);
  apa::write_json(j, (dir / "config.json").string());
}

std::pair<apa::Dataset, apa::Dataset> load_data(const Context& c) {
  const fs::path d = c.root / "data";
  for (const char* f : {"source.csv", "target.csv"})
    if (!fs::exists(d / f))
      throw MissingArtifact("missing " + (d / f).string() + "; run gen-data first");
  return {apa::read_dataset_csv((d / "source.csv").string()),
          apa::read_dataset_csv((d / "target.csv").string())};
}

apa::Model load_source_model(const Context& c) {
  const fs::path p = c.root / "source" / "checkpoint.json";
  if (!fs::exists(p))
    throw MissingArtifact("missing " + p.string() + "; run train --stage source first");
  apa::Model m = apa::load_checkpoint(p.string());
  if (m.input_dim() != c.cfg.task.input_dim || m.classes() != c.cfg.task.classes)
    throw UsageError("checkpoint " + p.string() + " does not match the configured task shape");
  return m;
}

void check_data_shape(const Context& c, const apa::Dataset& d) {
  if (d.x.cols() != c.cfg.task.input_dim)
    throw UsageError("dataset has " + std::to_string(d.x.cols()) + " features, config says " +
                     std::to_string(c.cfg.task.input_dim) + "; rerun gen-data");
}

std::string setting_name(apa::Setting s) {
  return s == apa::Setting::standard ? "standard" : "source-free";
}

json last_eval(const std::vector<apa::RunRecord>& recs) {
  json j;
  if (recs.empty()) return j;
  const apa::RunRecord& r = recs.back();
  j["step"] = r.step;
  j["source_acc"] = apa::json_number(r.source_acc);
  j["target_acc"] = apa::json_number(r.target_acc);
  j["target_class_acc"] = apa::json_number(r.target_class_acc);
  return j;
}

void write_records(const fs::path& dir, const std::vector<apa::RunRecord>& recs,
                   const std::string& title) {
  const std::string csv = (dir / "records.csv").string();
  apa::write_table_csv(apa::records_table(recs), csv);
  apa::write_svg_from_csv(csv, (dir / "accuracy.svg").string(),
                          {title, "step", "accuracy (%)", "step",
                           {"source_acc", "target_acc", "target_class_acc"}, false, false});
}

apa::ProbeConfig probe_config(const apa::RunConfig& rc) {
  apa::ProbeConfig p;
  p.apa_u = rc.train.losses.apa_u;
  p.apa_n = rc.train.losses.apa_n;
  p.vat = rc.train.losses.vat;
  p.step_lr = rc.probe.step_lr;
  p.topk = rc.probe.topk;
  p.seed = apa::derive_seed(rc.train.seed, 0x9b0be);
  return p;
}

// ---------------------------------------------------------------------------
// Commands

int cmd_gen_data(const Context& c) {
  const fs::path dir = output_dir(c, "data");
  echo_config(c, dir, {{"name", "gen-data"}});
  const auto [src, tgt] = apa::generate_task(c.cfg.task);
  apa::write_dataset_csv(src, (dir / "source.csv").string());
  apa::write_dataset_csv(tgt, (dir / "target.csv").string());
  std::printf("wrote %zu source and %zu target rows to %s\n", src.size(), tgt.size(),
              dir.string().c_str());
  return kOk;
}

int cmd_train(const Context& c, const std::string& stage, const std::string& loss_opt) {
  if (stage != "source" && stage != "adapt" && stage != "adapt-sf")
    throw UsageError("--stage must be source, adapt or adapt-sf");
  apa::AdaptConfig cfg = c.cfg.train;
  if (!loss_opt.empty()) {
    try {
      cfg.loss = apa::parse_loss(loss_opt);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  const auto [src, tgt] = load_data(c);
  check_data_shape(c, src);
  if (stage == "source") {
    const fs::path dir = output_dir(c, "source");
    echo_config(c, dir, {{"name", "train"}, {"stage", stage}});
    std::printf("source training: %zu steps\n", cfg.source_steps);
    const apa::SourceResult r = apa::run_source_stage(cfg, src, &tgt);
    apa::save_checkpoint(r.model, (dir / "checkpoint.json").string());
    write_records(dir, r.records, "source training");
    json s;
    s["stage"] = stage;
    s["final"] = last_eval(r.records);
    s["config"] = apa::run_config_to_json(c.cfg);
    apa::write_json(s, (dir / "summary.json").string());
    std::printf("source acc %.2f%%, target class-avg acc %.2f%%\n", r.records.back().source_acc,
                r.records.back().target_class_acc);
    return kOk;
  }
  const apa::Setting setting =
      stage == "adapt" ? apa::Setting::standard : apa::Setting::source_free;
  apa::Model m = load_source_model(c);
  const std::string name = stage + "-" + apa::loss_name(cfg.loss);
  const fs::path dir = output_dir(c, name);
  echo_config(c, dir, {{"name", "train"}, {"stage", stage}, {"loss", apa::loss_name(cfg.loss)}});
  std::printf("adaptation (%s, loss %s): %zu steps\n", setting_name(setting).c_str(),
              apa::loss_name(cfg.loss).c_str(), cfg.adapt_steps);
  const apa::AdaptResult r = apa::run_adapt_stage(cfg, std::move(m), &src, tgt, setting);
  apa::save_checkpoint(r.model, (dir / "checkpoint.json").string());
  write_records(dir, r.records, name);
  json s;
  s["stage"] = stage;
  s["setting"] = setting_name(setting);
  s["loss"] = apa::loss_name(cfg.loss);
  s["final"] = last_eval(r.records);
  s["min_drift"] = r.min_drift;
  s["drift_threshold"] = cfg.drift_threshold;
  s["drift_above_threshold"] = r.min_drift > cfg.drift_threshold;
  s["dropped_rows"] = r.dropped_rows;
  s["skipped_steps"] = r.skipped_steps;
  s["skipped_classes"] = r.skipped_classes;
  s["config"] = apa::run_config_to_json(c.cfg);
  apa::write_json(s, (dir / "summary.json").string());
  std::printf("target acc %.2f%%, class-avg %.2f%%, min drift %.4f\n",
              r.records.back().target_acc, r.records.back().target_class_acc, r.min_drift);
  return kOk;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

int cmd_sweep(const Context& c, const std::string& param_opt, const std::string& losses_opt) {
  apa::SweepParam param;
  std::vector<apa::LossKind> losses;
  try {
    param = apa::parse_sweep_param(param_opt);
    for (const std::string& l : split_list(losses_opt)) losses.push_back(apa::parse_loss(l));
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (losses.empty()) losses.push_back(param == apa::SweepParam::topk ? apa::LossKind::apa_topk
                                                                       : c.cfg.train.loss);
  const std::vector<double>& values = param == apa::SweepParam::eps    ? c.cfg.sweep.eps
                                      : param == apa::SweepParam::beta ? c.cfg.sweep.beta
                                                                       : c.cfg.sweep.topk;
  if (values.empty()) throw UsageError("sweep value list is empty");
  std::vector<apa::AdaptConfig> bases;
  for (apa::LossKind k : losses) {
    apa::AdaptConfig b = c.cfg.train;
    b.loss = k;
    try {
      for (double v : values) apa::sweep_config(b, param, v);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    bases.push_back(b);
  }
  const auto [src, tgt] = load_data(c);
  check_data_shape(c, src);
  const apa::Model m = load_source_model(c);
  const std::string pname = apa::sweep_param_name(param);
  const fs::path dir = output_dir(c, "sweep-" + pname);
  json names = json::array();
  for (apa::LossKind k : losses) names.push_back(apa::loss_name(k));
  echo_config(c, dir, {{"name", "sweep"}, {"param", pname}, {"losses", names}});

  apa::Table t;
  t.columns = {pname};
  for (apa::LossKind k : losses) {
    t.columns.push_back(apa::loss_name(k) + ":target_class_acc");
    t.columns.push_back(apa::loss_name(k) + ":target_acc");
  }
  std::vector<std::vector<apa::SweepPoint>> results;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    std::printf("sweep %s over %zu values, loss %s, %zu jobs\n", pname.c_str(), values.size(),
                apa::loss_name(losses[i]).c_str(), c.jobs);
    results.push_back(apa::sweep(bases[i], m, &src, tgt, c.cfg.setting, param, values, c.jobs));
  }
  json points = json::array();
  for (std::size_t v = 0; v < values.size(); ++v) {
    std::vector<double> row = {values[v]};
    json p;
    p[pname] = values[v];
    for (std::size_t i = 0; i < losses.size(); ++i) {
      row.push_back(results[i][v].target_class_acc);
      row.push_back(results[i][v].target_acc);
      p[apa::loss_name(losses[i])] = {{"target_class_acc", results[i][v].target_class_acc},
                                      {"target_acc", results[i][v].target_acc}};
      std::printf("  %s=%g %s: class-avg %.2f%%\n", pname.c_str(), values[v],
                  apa::loss_name(losses[i]).c_str(), results[i][v].target_class_acc);
    }
    t.add_row(std::move(row));
    points.push_back(p);
  }
  const std::string csv = (dir / "sweep.csv").string();
  apa::write_table_csv(t, csv);
  std::vector<std::string> ys;
  for (apa::LossKind k : losses) ys.push_back(apa::loss_name(k) + ":target_class_acc");
  apa::write_svg_from_csv(csv, (dir / "sweep.svg").string(),
                          {"target class-average accuracy vs " + pname, pname, "accuracy (%)",
                           pname, ys, param == apa::SweepParam::eps, true});
  json s;
  s["param"] = pname;
  s["setting"] = setting_name(c.cfg.setting);
  s["points"] = points;
  s["config"] = apa::run_config_to_json(c.cfg);
  apa::write_json(s, (dir / "summary.json").string());
  return kOk;
}

/// Fraction of finite values satisfying pred; NaN when there are none.
template <class P>
double rate(const std::vector<double>& xs, P pred) {
  std::size_t n = 0, k = 0;
  for (double x : xs) {
    if (!std::isfinite(x)) continue;
    ++n;
    k += pred(x) ? 1 : 0;
  }
  return n ? static_cast<double>(k) / static_cast<double>(n)
           : std::numeric_limits<double>::quiet_NaN();
}

double finite_mean(const std::vector<double>& xs) {
  double s = 0.0;
  std::size_t n = 0;
  for (double x : xs)
    if (std::isfinite(x)) s += x, ++n;
  return n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

int probe_drift(const Context& c, const fs::path& dir, const apa::Dataset& src,
                const apa::Dataset& tgt, apa::Model m) {
  std::printf("drift probe: %s adaptation, loss %s\n", setting_name(c.cfg.setting).c_str(),
              apa::loss_name(c.cfg.train.loss).c_str());
  const apa::AdaptResult r =
      apa::run_adapt_stage(c.cfg.train, std::move(m), &src, tgt, c.cfg.setting);
  apa::Table t;
  t.columns = {"step", "drift", "target_class_acc"};
  for (const apa::RunRecord& rec : r.records)
    if (rec.stage != "source") t.add_row({static_cast<double>(rec.step), rec.drift, rec.target_class_acc});
  const std::string csv = (dir / "drift.csv").string();
  apa::write_table_csv(t, csv);
  apa::write_svg_from_csv(csv, (dir / "drift.svg").string(),
                          {"classifier drift during adaptation", "step", "cosine to source weights",
                           "step", {"drift"}, false, false});
  json s;
  s["kind"] = "drift";
  s["min_drift"] = r.min_drift;
  s["drift_threshold"] = c.cfg.train.drift_threshold;
  s["drift_above_threshold"] = r.min_drift > c.cfg.train.drift_threshold;
  s["final"] = last_eval(r.records);
  s["config"] = apa::run_config_to_json(c.cfg);
  apa::write_json(s, (dir / "summary.json").string());
  std::printf("min drift %.4f (soft threshold %.2f)\n", r.min_drift, c.cfg.train.drift_threshold);
  return kOk;
}

int probe_corr(const Context& c, const fs::path& dir, const apa::Dataset& src,
               const apa::Dataset& tgt, apa::Model m) {
  std::printf("correlation probe: %s adaptation, loss %s, batch %zu\n",
              setting_name(c.cfg.setting).c_str(), apa::loss_name(c.cfg.train.loss).c_str(),
              c.cfg.probe.batch);
  const apa::ProbeHook hook = apa::correlation_hook(tgt, c.cfg.probe.batch, probe_config(c.cfg));
  const apa::AdaptResult r =
      apa::run_adapt_stage(c.cfg.train, std::move(m), &src, tgt, c.cfg.setting, hook);
  std::vector<apa::RunRecord> recs;
  for (const apa::RunRecord& rec : r.records)
    if (rec.stage != "source") recs.push_back(rec);
  const apa::Table all = apa::records_table(recs);
  const std::size_t C = c.cfg.task.classes;
  const std::size_t W = c.cfg.probe.smoothing_window;
  const std::vector<double> steps = all.column("step");
  const std::vector<double> skipped = all.column("probe_skipped");
  auto series = [&](const std::string& key) {
    std::vector<double> v = all.column(key);
    for (std::size_t i = 0; i < v.size(); ++i)
      if (skipped[i] != 0.0) v[i] = std::numeric_limits<double>::quiet_NaN();
    return v;
  };

  // Perturbation versus gradient and activation change.
  const std::vector<std::pair<std::string, std::string>> fig = {
      {"cos:grad_n:r_n", "cos_rn_grad_n"},   {"cos:delta_n:r_n", "cos_rn_delta_n"},
      {"cos:grad_u:r_u", "cos_ru_grad_u"},   {"cos:delta_u:r_u", "cos_ru_delta_u"},
      {"cos:delta_i:r_n", "cos_rn_delta_i"},
  };
  apa::Table corr;
  corr.columns = {"step"};
  std::vector<std::vector<double>> cols;
  for (const auto& [key, name] : fig) {
    corr.columns.push_back(name);
    cols.push_back(series(key));
  }
  for (const auto& [key, name] : fig) corr.columns.push_back(name + "_smooth");
  const std::size_t nfig = cols.size();
  for (std::size_t k = 0; k < nfig; ++k) cols.push_back(apa::moving_average(cols[k], W));
  for (std::size_t i = 0; i < steps.size(); ++i) {
    std::vector<double> row = {steps[i]};
    for (const auto& col : cols) row.push_back(col[i]);
    corr.add_row(std::move(row));
  }
  const std::string corr_csv = (dir / "corr.csv").string();
  apa::write_table_csv(corr, corr_csv);
  apa::write_svg_from_csv(corr_csv, (dir / "corr.svg").string(),
                          {"perturbation correlations (smoothed)", "step", "batch-mean cosine",
                           "step",
                           {"cos_rn_grad_n_smooth", "cos_rn_delta_n_smooth",
                            "cos_ru_grad_u_smooth", "cos_ru_delta_u_smooth"},
                           false, false});

  // Sign rates after warm-up on the raw batch means.
  std::vector<double> g_after, d_after;
  const std::vector<double> g = series("cos:grad_n:r_n"), d = series("cos:delta_n:r_n");
  for (std::size_t i = 0; i < steps.size(); ++i)
    if (steps[i] > static_cast<double>(c.cfg.probe.warmup)) {
      g_after.push_back(g[i]);
      d_after.push_back(d[i]);
    }
  json s;
  s["kind"] = "corr";
  s["warmup"] = c.cfg.probe.warmup;
  s["probe_steps_after_warmup"] = g_after.size();
  s["rate_cos_rn_grad_n_positive"] = apa::json_number(rate(g_after, [](double x) { return x > 0; }));
  s["rate_cos_rn_delta_n_negative"] = apa::json_number(rate(d_after, [](double x) { return x < 0; }));
  s["mean_cos_rn_grad_n"] = apa::json_number(finite_mean(g_after));
  s["mean_cos_rn_delta_n"] = apa::json_number(finite_mean(d_after));

  if (c.cfg.probe.topk) {
    apa::Table tk;
    tk.columns = {"step"};
    std::vector<std::vector<double>> kc;
    for (std::size_t k = 1; k <= C; ++k) {
      tk.columns.push_back("cos_rn_top" + std::to_string(k));
      kc.push_back(series("cos:r_n:topk_" + std::to_string(k)));
    }
    std::size_t checked = 0, violations = 0;
    for (std::size_t i = 0; i < steps.size(); ++i) {
      std::vector<double> row = {steps[i]};
      bool finite = true, mono = true;
      for (std::size_t k = 0; k < C; ++k) {
        row.push_back(kc[k][i]);
        finite = finite && std::isfinite(kc[k][i]);
        if (k > 0 && kc[k][i] < kc[k - 1][i]) mono = false;
      }
      if (finite) {
        ++checked;
        violations += mono ? 0 : 1;
      }
      tk.add_row(std::move(row));
    }
    const std::string tk_csv = (dir / "topk.csv").string();
    apa::write_table_csv(tk, tk_csv);
    std::vector<std::string> ys(tk.columns.begin() + 1, tk.columns.end());
    apa::write_svg_from_csv(tk_csv, (dir / "topk.svg").string(),
                            {"top-k perturbation vs full perturbation", "step", "batch-mean cosine",
                             "step", ys, false, false});
    json means = json::array();
    bool all_positive = true, mean_monotone = true;
    double prev = -INFINITY;
    for (std::size_t k = 0; k < C; ++k) {
      const double mk = finite_mean(kc[k]);
      means.push_back(apa::json_number(mk));
      all_positive = all_positive && mk > 0.0;
      mean_monotone = mean_monotone && mk >= prev;
      prev = mk;
    }
    s["topk_mean_cos"] = means;
    s["topk_all_positive"] = all_positive;
    s["topk_mean_nondecreasing"] = mean_monotone;
    s["topk_steps_checked"] = checked;
    s["topk_violation_rate"] =
        apa::json_number(checked ? static_cast<double>(violations) / static_cast<double>(checked)
                                 : std::numeric_limits<double>::quiet_NaN());
  }
  std::size_t n_skipped = 0;
  for (double v : skipped) n_skipped += v != 0.0;
  s["probe_steps"] = steps.size();
  s["probe_steps_skipped"] = n_skipped;
  s["final"] = last_eval(r.records);
  s["config"] = apa::run_config_to_json(c.cfg);
  apa::write_json(s, (dir / "summary.json").string());
  std::printf("after warm-up: cos(r_n, grad_n) > 0 at %.0f%%, cos(r_n, delta_n) < 0 at %.0f%% of %zu steps\n",
              100.0 * rate(g_after, [](double x) { return x > 0; }),
              100.0 * rate(d_after, [](double x) { return x < 0; }), g_after.size());
  return kOk;
}

int probe_shrink(const Context& c, const fs::path& dir, const apa::Dataset& tgt,
                 const apa::Model& m) {
  std::printf("shrinking probe on %zu target rows\n", c.cfg.probe.batch);
  const apa::Tensor x =
      apa::probe_batch(tgt, c.cfg.probe.batch, apa::derive_seed(c.cfg.train.seed, 0x5b81c));
  const auto rows = apa::probe_shrinking(m, x, c.cfg.probe.shrink_eps, c.cfg.probe.shrink_xi,
                                         apa::derive_seed(c.cfg.train.seed, 0x5b81d));
  apa::Table t;
  t.columns = {"epsilon",        "mean_ratio",          "min_ratio", "max_ratio",
               "grad_ratio",     "inverse_perturbed_norm", "mean_perturbed_norm", "used"};
  json out = json::array();
  for (const apa::ShrinkRow& r : rows) {
    t.add_row({r.epsilon, r.mean_ratio, r.min_ratio, r.max_ratio, r.mean_grad_ratio,
               1.0 / r.mean_perturbed_norm, r.mean_perturbed_norm, static_cast<double>(r.used)});
    out.push_back({{"epsilon", r.epsilon},
                   {"mean_ratio", apa::json_number(r.mean_ratio)},
                   {"grad_ratio", apa::json_number(r.mean_grad_ratio)},
                   {"mean_perturbed_norm", apa::json_number(r.mean_perturbed_norm)},
                   {"used", r.used}});
    std::printf("  eps %g: |grad_u|/|grad_n| %.4g, 1/|z+r| %.4g, ratio %.4f\n", r.epsilon,
                r.mean_grad_ratio, 1.0 / r.mean_perturbed_norm, r.mean_ratio);
  }
  const std::string csv = (dir / "shrink.csv").string();
  apa::write_table_csv(t, csv);
  apa::write_svg_from_csv(csv, (dir / "shrink.svg").string(),
                          {"gradient shrinking of the un-normalized loss", "epsilon",
                           "gradient norm ratio", "epsilon",
                           {"grad_ratio", "inverse_perturbed_norm"}, true, true});
  json s;
  s["kind"] = "shrink";
  s["rows"] = out;
  s["config"] = apa::run_config_to_json(c.cfg);
  apa::write_json(s, (dir / "summary.json").string());
  return kOk;
}

int cmd_probe(const Context& c, const std::string& kind) {
  if (kind != "drift" && kind != "corr" && kind != "shrink")
    throw UsageError("--kind must be drift, corr or shrink");
  const auto [src, tgt] = load_data(c);
  check_data_shape(c, src);
  apa::Model m = load_source_model(c);
  const fs::path dir = output_dir(c, "probe-" + kind);
  echo_config(c, dir, {{"name", "probe"}, {"kind", kind}});
  if (kind == "drift") return probe_drift(c, dir, src, tgt, std::move(m));
  if (kind == "corr") return probe_corr(c, dir, src, tgt, std::move(m));
  return probe_shrink(c, dir, tgt, m);
}

int cmd_verify(const Context& c, const std::string& level) {
  if (level != "fast" && level != "full") throw UsageError("--level must be fast or full");
  const fs::path dir = output_dir(c, "verify-" + level);
  echo_config(c, dir, {{"name", "verify"}, {"level", level}});
  const apa::VerifyReport rep = apa::run_verify(level);
  apa::write_json(rep.to_json(false), (dir / "report.json").string());
  std::size_t failed = 0;
  for (const apa::CheckResult& k : rep.checks) {
    if (k.passed()) continue;
    ++failed;
    std::printf("FAIL %s/%s: measured %.6g, %s %.6g\n", k.group.c_str(), k.name.c_str(),
                k.measured, k.at_least ? "needs >=" : "needs <=", k.tolerance);
  }
  std::printf("verify %s: %zu of %zu checks passed in %.2f s\n", level.c_str(),
              rep.checks.size() - failed, rep.checks.size(), rep.seconds);
  return rep.passed() ? kOk : kVerifyFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial perturbed activation experiments"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "YAML config file (defaults when omitted)");
  app.add_option("--out", g.out, "output root (default: config output_dir, $APA_OUTPUT_ROOT, runs)");
  app.add_option("--seed", g.seed, "override the config seed");
  app.add_flag("--force", g.force, "overwrite an existing output directory");
  app.add_option("--jobs", g.jobs, "parallel sweep runs")->check(CLI::PositiveNumber);

  auto* gen = app.add_subcommand("gen-data", "write source.csv and target.csv");
  auto* train = app.add_subcommand("train", "run one training stage");
  std::string stage, loss;
  train->add_option("--stage", stage, "source, adapt or adapt-sf")->required();
  train->add_option("--loss", loss, "target loss for adaptation stages");
  auto* sweep = app.add_subcommand("sweep", "adaptation runs over eps, beta or topk");
  std::string param, losses;
  sweep->add_option("--param", param, "eps, beta or topk")->required();
  sweep->add_option("--losses", losses, "comma-separated losses (default: config loss)");
  auto* probe = app.add_subcommand("probe", "drift, correlation or shrinking probe");
  std::string kind;
  probe->add_option("--kind", kind, "drift, corr or shrink")->required();
  auto* verify = app.add_subcommand("verify", "gradient, identity and oracle checks");
  std::string level = "fast";
  verify->add_option("--level", level, "fast or full");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }

  try {
    const Context c = make_context(g);
    if (gen->parsed()) return cmd_gen_data(c);
    if (train->parsed()) return cmd_train(c, stage, loss);
    if (sweep->parsed()) return cmd_sweep(c, param, losses);
    if (probe->parsed()) return cmd_probe(c, kind);
    if (verify->parsed()) return cmd_verify(c, level);
  } catch (const apa::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfigError;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kConfigError;
  } catch (const MissingArtifact& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kMissing;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  }
  return kConfigError;
}
