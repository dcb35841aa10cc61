#pragma once

// Run configuration file: a YAML mapping of sections to flat key/value
// pairs. Unknown sections and keys are rejected with their line number;
// anything absent keeps the default below.

#include <yaml-cpp/yaml.h>

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <nlohmann/json.hpp>
#include <stdexcept>
#include <string>
#include <vector>

#include "apa/data.hpp"
#include "apa/train.hpp"

namespace apa {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ProbeOptions {
  std::size_t batch = 256;
  /// Evaluations before this adaptation step are excluded from sign checks.
  std::size_t warmup = 400;
  std::size_t smoothing_window = 10;
  double step_lr = 1e-3;
  bool topk = true;
  std::vector<double> shrink_eps = {1, 3, 10, 30, 100};
  double shrink_xi = 10.0;
};

struct SweepOptions {
  std::vector<double> eps = {1, 3, 10, 30, 100};
  std::vector<double> beta = {0.0, 0.05, 0.1, 0.2, 0.5};
  std::vector<double> topk = {1, 2, 3, 4};
};

struct RunConfig {
  TaskSpec task;
  AdaptConfig train;
  /// Setting used by sweep and probe; train picks it from --stage.
  Setting setting = Setting::source_free;
  ProbeOptions probe;
  SweepOptions sweep;
  std::string output_dir;  // empty: see default_output_root()
};

inline RunConfig default_run_config() { return RunConfig{}; }

namespace detail {

template <class T>
T scalar_as(const YAML::Node& n, const std::string& key) {
  if (!n.IsScalar())
    throw ConfigError("line " + std::to_string(n.Mark().line + 1) + ": '" + key +
                      "' expects a scalar");
  try {
    return n.as<T>();
  } catch (const YAML::BadConversion&) {
    throw ConfigError("line " + std::to_string(n.Mark().line + 1) + ": bad value '" +
                      n.Scalar() + "' for '" + key + "'");
  }
}

inline std::vector<double> list_as(const YAML::Node& n, const std::string& key) {
  if (!n.IsSequence() || n.size() == 0)
    throw ConfigError("line " + std::to_string(n.Mark().line + 1) + ": '" + key +
                      "' expects a non-empty list");
  std::vector<double> out;
  for (const YAML::Node& v : n) out.push_back(scalar_as<double>(v, key));
  return out;
}

inline std::size_t count_as(const YAML::Node& n, const std::string& key) {
  const long long v = scalar_as<long long>(n, key);
  if (v < 0)
    throw ConfigError("line " + std::to_string(n.Mark().line + 1) + ": '" + key +
                      "' must be non-negative");
  return static_cast<std::size_t>(v);
}

using Setter = std::function<void(const YAML::Node&, RunConfig&)>;

inline const std::map<std::string, std::map<std::string, Setter>>& config_keys() {
  using N = const YAML::Node&;
  using C = RunConfig&;
#define APA_D(field) [](N n, C c) { c.field = scalar_as<double>(n, #field); }
#define APA_S(field) [](N n, C c) { c.field = count_as(n, #field); }
#define APA_B(field) [](N n, C c) { c.field = scalar_as<bool>(n, #field); }
  static const std::map<std::string, std::map<std::string, Setter>> keys = {
      {"",
       {
           {"seed",
            [](N n, C c) {
              c.train.seed = c.task.seed = scalar_as<std::uint64_t>(n, "seed");
            }},
           {"output_dir", [](N n, C c) { c.output_dir = scalar_as<std::string>(n, "output_dir"); }},
           {"setting",
            [](N n, C c) {
              const auto s = scalar_as<std::string>(n, "setting");
              if (s == "standard") c.setting = Setting::standard;
              else if (s == "source-free") c.setting = Setting::source_free;
              else
                throw ConfigError("line " + std::to_string(n.Mark().line + 1) +
                                  ": setting must be standard or source-free");
            }},
       }},
      {"data",
       {
           {"classes", APA_S(task.classes)},
           {"input_dim", APA_S(task.input_dim)},
           {"samples", APA_S(task.samples)},
           {"separation", APA_D(task.separation)},
           {"class_std", APA_D(task.class_std)},
           {"mean_offset", APA_D(task.shift.mean_offset)},
           {"rotation_deg", APA_D(task.shift.rotation_deg)},
           {"label_skew", APA_D(task.shift.label_skew)},
           {"rotation_planes",
            [](N n, C c) {
              const auto s = scalar_as<std::string>(n, "rotation_planes");
              if (s == "adjacent") c.task.shift.planes = RotationPlanes::adjacent;
              else if (s == "interleaved") c.task.shift.planes = RotationPlanes::interleaved;
              else
                throw ConfigError("line " + std::to_string(n.Mark().line + 1) +
                                  ": rotation_planes must be adjacent or interleaved");
            }},
       }},
      {"model",
       {
           {"hidden",
            [](N n, C c) {
              c.train.shape.hidden.clear();
              for (double v : list_as(n, "hidden")) {
                if (v < 1 || v != static_cast<double>(static_cast<std::size_t>(v)))
                  throw ConfigError("line " + std::to_string(n.Mark().line + 1) +
                                    ": hidden widths must be positive integers");
                c.train.shape.hidden.push_back(static_cast<std::size_t>(v));
              }
            }},
           {"bottleneck", APA_S(train.shape.bottleneck)},
           {"temperature", APA_D(train.temperature)},
       }},
      {"train",
       {
           {"loss",
            [](N n, C c) {
              try {
                c.train.loss = parse_loss(scalar_as<std::string>(n, "loss"));
              } catch (const std::invalid_argument& e) {
                throw ConfigError("line " + std::to_string(n.Mark().line + 1) + ": " + e.what());
              }
            }},
           {"beta", APA_D(train.beta)},
           {"tau", APA_D(train.tau)},
           {"batch_size", APA_S(train.batch_size)},
           {"source_steps", APA_S(train.source_steps)},
           {"adapt_steps", APA_S(train.adapt_steps)},
           {"source_lr", APA_D(train.source_lr)},
           {"eta0", APA_D(train.schedule.eta0)},
           {"lr_gamma", APA_D(train.schedule.gamma)},
           {"lr_power", APA_D(train.schedule.power)},
           {"momentum", APA_D(train.sgd.momentum)},
           {"weight_decay", APA_D(train.sgd.weight_decay)},
           {"refresh_interval", APA_S(train.refresh_interval)},
           {"eval_interval", APA_S(train.eval_interval)},
           {"freeze_classifier", APA_B(train.freeze_classifier)},
           {"target_batch_stats", APA_B(train.target_batch_stats)},
           {"divergence_limit", APA_D(train.divergence_limit)},
           {"drift_threshold", APA_D(train.drift_threshold)},
       }},
      {"perturb",
       {
           {"apa_u_eps", APA_D(train.losses.apa_u.epsilon)},
           {"apa_u_xi", APA_D(train.losses.apa_u.xi)},
           {"apa_n_eps", APA_D(train.losses.apa_n.epsilon)},
           {"apa_n_xi", APA_D(train.losses.apa_n.xi)},
           {"vat_eps", APA_D(train.losses.vat.epsilon)},
           {"vat_xi", APA_D(train.losses.vat.xi)},
           {"intermediate_eps", APA_D(train.losses.intermediate.epsilon)},
           {"intermediate_xi", APA_D(train.losses.intermediate.xi)},
           {"topk", APA_S(train.losses.topk)},
       }},
      {"baselines",
       {
           {"fixmatch_tau", APA_D(train.losses.tau)},
           {"weak_sigma", APA_D(train.losses.jitter.weak_sigma)},
           {"strong_sigma", APA_D(train.losses.jitter.strong_sigma)},
           {"mask_rate", APA_D(train.losses.jitter.mask_rate)},
           {"committee_size", APA_S(train.losses.committee.size)},
           {"committee_noise", APA_D(train.losses.committee.noise_scale)},
           {"committee_history", APA_S(train.losses.committee.history)},
           {"committee_majority", APA_D(train.losses.committee.majority)},
       }},
      {"probe",
       {
           {"batch", APA_S(probe.batch)},
           {"warmup", APA_S(probe.warmup)},
           {"smoothing_window", APA_S(probe.smoothing_window)},
           {"step_lr", APA_D(probe.step_lr)},
           {"topk", APA_B(probe.topk)},
           {"shrink_eps", [](N n, C c) { c.probe.shrink_eps = list_as(n, "shrink_eps"); }},
           {"shrink_xi", APA_D(probe.shrink_xi)},
       }},
      {"sweep",
       {
           {"eps", [](N n, C c) { c.sweep.eps = list_as(n, "eps"); }},
           {"beta", [](N n, C c) { c.sweep.beta = list_as(n, "beta"); }},
           {"topk", [](N n, C c) { c.sweep.topk = list_as(n, "topk"); }},
       }},
  };
#undef APA_D
#undef APA_S
#undef APA_B
  return keys;
}

inline std::string line_of(const YAML::Node& n) { return "line " + std::to_string(n.Mark().line + 1); }

}  // namespace detail

/// Cross-field checks shared by every loader.
inline void validate_run_config(RunConfig& c) {
  c.train.shape.input_dim = c.task.input_dim;
  c.train.shape.classes = c.task.classes;
  try {
    c.train.validate();
    if (c.task.classes < 2) throw std::invalid_argument("classes must be at least 2");
    if (c.task.input_dim < 2) throw std::invalid_argument("input_dim must be at least 2");
    if (c.task.samples < c.task.classes)
      throw std::invalid_argument("samples must be at least classes");
    if (!(c.task.class_std > 0.0)) throw std::invalid_argument("class_std must be positive");
    if (!(c.task.shift.label_skew > 0.0)) throw std::invalid_argument("label_skew must be positive");
    if (c.probe.batch == 0) throw std::invalid_argument("probe batch must be positive");
    if (c.probe.smoothing_window == 0)
      throw std::invalid_argument("smoothing_window must be positive");
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
}

inline RunConfig parse_run_config(const std::string& text) {
  RunConfig c = default_run_config();
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw ConfigError("line " + std::to_string(e.mark.line + 1) + ": " + e.msg);
  }
  if (root.IsNull()) {
    validate_run_config(c);
    return c;
  }
  if (!root.IsMap()) throw ConfigError("line 1: config must be a mapping of sections");
  const auto& keys = detail::config_keys();
  const auto& top = keys.at("");
  for (const auto& kv : root) {
    const std::string name = kv.first.as<std::string>();
    if (auto it = top.find(name); it != top.end()) {
      it->second(kv.second, c);
      continue;
    }
    auto sec = keys.find(name);
    if (sec == keys.end() || name.empty())
      throw ConfigError(detail::line_of(kv.first) + ": unknown key '" + name + "'");
    if (kv.second.IsNull()) continue;
    if (!kv.second.IsMap())
      throw ConfigError(detail::line_of(kv.first) + ": section '" + name + "' must be a mapping");
    for (const auto& e : kv.second) {
      const std::string key = e.first.as<std::string>();
      auto it = sec->second.find(key);
      if (it == sec->second.end())
        throw ConfigError(detail::line_of(e.first) + ": unknown key '" + name + "." + key + "'");
      it->second(e.second, c);
    }
  }
  validate_run_config(c);
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read config '" + path + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  try {
    return parse_run_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

/// Effective configuration, every key included, in file section order.
inline nlohmann::ordered_json run_config_to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["seed"] = c.train.seed;
  j["setting"] = c.setting == Setting::standard ? "standard" : "source-free";
  j["output_dir"] = c.output_dir;
  j["data"] = {
      {"classes", c.task.classes},
      {"input_dim", c.task.input_dim},
      {"samples", c.task.samples},
      {"separation", c.task.separation},
      {"class_std", c.task.class_std},
      {"mean_offset", c.task.shift.mean_offset},
      {"rotation_deg", c.task.shift.rotation_deg},
      {"label_skew", c.task.shift.label_skew},
      {"rotation_planes",
       c.task.shift.planes == RotationPlanes::adjacent ? "adjacent" : "interleaved"},
  };
  j["model"] = {
      {"hidden", c.train.shape.hidden},
      {"bottleneck", c.train.shape.bottleneck},
      {"temperature", c.train.temperature},
  };
  const AdaptConfig& t = c.train;
  j["train"] = {
      {"loss", loss_name(t.loss)},
      {"beta", t.beta},
      {"tau", t.tau},
      {"batch_size", t.batch_size},
      {"source_steps", t.source_steps},
      {"adapt_steps", t.adapt_steps},
      {"source_lr", t.source_lr},
      {"eta0", t.schedule.eta0},
      {"lr_gamma", t.schedule.gamma},
      {"lr_power", t.schedule.power},
      {"momentum", t.sgd.momentum},
      {"weight_decay", t.sgd.weight_decay},
      {"refresh_interval", t.refresh_interval},
      {"eval_interval", t.eval_interval},
      {"freeze_classifier", t.freeze_classifier},
      {"target_batch_stats", t.target_batch_stats},
      {"divergence_limit", t.divergence_limit},
      {"drift_threshold", t.drift_threshold},
  };
  j["perturb"] = {
      {"apa_u_eps", t.losses.apa_u.epsilon},
      {"apa_u_xi", t.losses.apa_u.xi},
      {"apa_n_eps", t.losses.apa_n.epsilon},
      {"apa_n_xi", t.losses.apa_n.xi},
      {"vat_eps", t.losses.vat.epsilon},
      {"vat_xi", t.losses.vat.xi},
      {"intermediate_eps", t.losses.intermediate.epsilon},
      {"intermediate_xi", t.losses.intermediate.xi},
      {"topk", t.losses.topk},
  };
  j["baselines"] = {
      {"fixmatch_tau", t.losses.tau},
      {"weak_sigma", t.losses.jitter.weak_sigma},
      {"strong_sigma", t.losses.jitter.strong_sigma},
      {"mask_rate", t.losses.jitter.mask_rate},
      {"committee_size", t.losses.committee.size},
      {"committee_noise", t.losses.committee.noise_scale},
      {"committee_history", t.losses.committee.history},
      {"committee_majority", t.losses.committee.majority},
  };
  j["probe"] = {
      {"batch", c.probe.batch},
      {"warmup", c.probe.warmup},
      {"smoothing_window", c.probe.smoothing_window},
      {"step_lr", c.probe.step_lr},
      {"topk", c.probe.topk},
      {"shrink_eps", c.probe.shrink_eps},
      {"shrink_xi", c.probe.shrink_xi},
  };
  j["sweep"] = {{"eps", c.sweep.eps}, {"beta", c.sweep.beta}, {"topk", c.sweep.topk}};
  return j;
}

}  // namespace apa
