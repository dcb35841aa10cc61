#pragma once

// Synthetic domain pairs, (pseudo-)class-balanced batch sampling and the
// pseudo-label table.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "apa/model.hpp"
#include "apa/perturb.hpp"

namespace apa {

/// Gaussian mixture description of one domain.
struct DomainSpec {
  std::size_t classes = 4;
  std::size_t input_dim = 8;
  Tensor means;                     // [C x d]
  std::vector<double> class_scale;  // isotropic std per class
  std::vector<double> label_dist;   // on the simplex
  std::size_t samples = 2000;
  std::uint64_t seed = 0;

  void validate() const {
    if (classes < 1 || input_dim < 1) throw std::invalid_argument("domain: empty shape");
    if (means.rows() != classes || means.cols() != input_dim)
      throw DimensionMismatch("domain: means must be " + std::to_string(classes) + "x" +
                              std::to_string(input_dim));
    if (class_scale.size() != classes || label_dist.size() != classes)
      throw DimensionMismatch("domain: per-class vectors must have C entries");
    for (double s : class_scale)
      if (!(s > 0.0) || !std::isfinite(s)) throw DegenerateInput("domain: degenerate covariance");
    double total = 0.0;
    for (double p : label_dist) {
      if (p < 0.0) throw std::invalid_argument("domain: negative label probability");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("domain: label distribution must sum to 1");
    if (samples < classes) throw std::invalid_argument("domain: fewer samples than classes");
  }
};

/// Covariate and label shift applied to the target domain.
/// Coordinate planes a rotation acts in: (0,1), (2,3), ... for adjacent;
/// (0,h), (1,h+1), ... with h = d/2 for interleaved.
enum class RotationPlanes { adjacent, interleaved };

struct ShiftSpec {
  /// Translation length in units of the mean class std.
  double mean_offset = 0.0;
  /// Rotation angle applied in every plane of `planes`; degrees.
  double rotation_deg = 0.0;
  /// Max/min class-probability ratio; source decreasing, target increasing
  /// with class index. 1 disables label shift.
  double label_skew = 1.0;
  RotationPlanes planes = RotationPlanes::adjacent;
  /// Translation direction, normalized before use; empty means (1, ..., 1).
  std::vector<double> offset_direction{};
};

inline std::vector<std::pair<std::size_t, std::size_t>> rotation_planes(RotationPlanes p,
                                                                        std::size_t d) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  const std::size_t h = d / 2;
  for (std::size_t k = 0; k < h; ++k)
    out.emplace_back(p == RotationPlanes::adjacent ? std::pair{2 * k, 2 * k + 1}
                                                   : std::pair{k, k + h});
  return out;
}

struct Dataset {
  Tensor x;                         // [n x d]
  std::vector<std::size_t> labels;  // ground truth
  std::string domain;

  std::size_t size() const { return labels.size(); }
  std::size_t classes() const {
    return labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
  }
};

/// Skewed label distribution p_c proportional to skew^(-c/(C-1)); reversed
/// when `increasing`.
inline std::vector<double> skewed_distribution(std::size_t C, double skew, bool increasing) {
  std::vector<double> p(C, 1.0);
  if (C > 1) {
    for (std::size_t c = 0; c < C; ++c) {
      const double t = static_cast<double>(increasing ? C - 1 - c : c) / static_cast<double>(C - 1);
      p[c] = std::pow(skew, -t);
    }
  }
  double s = 0.0;
  for (double v : p) s += v;
  for (double& v : p) v /= s;
  return p;
}

/// Per-class counts: floor(n p_c) plus the remainder handed out by largest
/// fractional part (ties to the lower class index).
inline std::vector<std::size_t> class_counts(const std::vector<double>& p, std::size_t n) {
  std::vector<std::size_t> counts(p.size());
  std::vector<std::pair<double, std::size_t>> frac;
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < p.size(); ++c) {
    const double exact = p[c] * static_cast<double>(n);
    counts[c] = static_cast<std::size_t>(std::floor(exact));
    assigned += counts[c];
    frac.emplace_back(exact - std::floor(exact), c);
  }
  std::stable_sort(frac.begin(), frac.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++counts[frac[k % frac.size()].second];
  return counts;
}

namespace detail {

inline Dataset sample_domain(const DomainSpec& spec, const std::string& name) {
  spec.validate();
  const std::size_t d = spec.input_dim;
  const auto counts = class_counts(spec.label_dist, spec.samples);
  std::vector<std::size_t> labels;
  for (std::size_t c = 0; c < counts.size(); ++c) labels.insert(labels.end(), counts[c], c);
  std::mt19937_64 rng(spec.seed);
  std::shuffle(labels.begin(), labels.end(), rng);
  std::normal_distribution<double> N(0.0, 1.0);
  Tensor x({spec.samples, d});
  for (std::size_t i = 0; i < spec.samples; ++i) {
    const std::size_t c = labels[i];
    for (std::size_t k = 0; k < d; ++k)
      x.at(i, k) = spec.means.at(c, k) + spec.class_scale[c] * N(rng);
  }
  return {std::move(x), std::move(labels), name};
}

/// Rotates in every configured plane, then translates.
inline void apply_covariate_shift(Tensor& x, const ShiftSpec& shift, double unit) {
  const double th = shift.rotation_deg * std::numbers::pi / 180.0;
  const double c = std::cos(th), s = std::sin(th);
  const std::size_t d = x.cols();
  std::vector<double> dir = shift.offset_direction;
  if (dir.empty()) dir.assign(d, 1.0);
  if (dir.size() != d) throw DimensionMismatch("shift: offset direction must have d entries");
  if (!(norm2(dir) > 0.0)) throw DegenerateInput("shift: zero offset direction");
  dir = normalized(dir);
  const auto planes = rotation_planes(shift.planes, d);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (const auto& [k, l] : planes) {
      const double a = x.at(i, k), b = x.at(i, l);
      x.at(i, k) = c * a - s * b;
      x.at(i, l) = s * a + c * b;
    }
    for (std::size_t k = 0; k < d; ++k) x.at(i, k) += shift.mean_offset * unit * dir[k];
  }
}

}  // namespace detail

/// Source samples from spec_s; target samples from spec_t followed by the
/// covariate shift. Label shift is expressed through spec_t.label_dist.
inline std::pair<Dataset, Dataset> generate_domain_pair(const DomainSpec& spec_s,
                                                        const DomainSpec& spec_t,
                                                        const ShiftSpec& shift) {
  if (spec_s.classes != spec_t.classes || spec_s.input_dim != spec_t.input_dim)
    throw DimensionMismatch("domain pair: class count and input dim must agree");
  Dataset src = detail::sample_domain(spec_s, "source");
  Dataset tgt = detail::sample_domain(spec_t, "target");
  double unit = 0.0;
  for (double s : spec_t.class_scale) unit += s;
  unit /= static_cast<double>(spec_t.class_scale.size());
  detail::apply_covariate_shift(tgt.x, shift, unit);
  return {std::move(src), std::move(tgt)};
}

/// Class means evenly spaced on a circle of radius `radius` in the plane of
/// the first two coordinates; the remaining coordinates carry noise only.
inline Tensor ring_class_means(std::size_t C, std::size_t d, double radius) {
  if (d < 2) throw DimensionMismatch("ring layout needs at least two input dims");
  Tensor m({C, d});
  for (std::size_t c = 0; c < C; ++c) {
    const double a = 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(C);
    m.at(c, 0) = radius * std::cos(a);
    m.at(c, 1) = radius * std::sin(a);
  }
  return m;
}

/// Parameters of the default synthetic task.
struct TaskSpec {
  std::size_t classes = 4;
  std::size_t input_dim = 8;
  std::size_t samples = 2000;
  double separation = 4.0;
  double class_std = 1.0;
  ShiftSpec shift{.mean_offset = 1.5, .rotation_deg = 30.0, .label_skew = 4.0};
  std::uint64_t seed = 1;
};

inline std::pair<DomainSpec, DomainSpec> domain_specs(const TaskSpec& t) {
  DomainSpec s;
  s.classes = t.classes;
  s.input_dim = t.input_dim;
  s.means = ring_class_means(t.classes, t.input_dim, t.separation);
  s.class_scale.assign(t.classes, t.class_std);
  s.label_dist = skewed_distribution(t.classes, t.shift.label_skew, false);
  s.samples = t.samples;
  s.seed = derive_seed(t.seed, 1);
  DomainSpec g = s;
  g.label_dist = skewed_distribution(t.classes, t.shift.label_skew, true);
  g.seed = derive_seed(t.seed, 2);
  return {s, g};
}

inline std::pair<Dataset, Dataset> generate_task(const TaskSpec& t) {
  auto [s, g] = domain_specs(t);
  return generate_domain_pair(s, g, t.shift);
}

// ---------------------------------------------------------------------------
// CSV

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_dataset_csv(const Dataset& ds, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  for (std::size_t k = 0; k < ds.x.cols(); ++k) os << "feat_" << k << ',';
  os << "label,domain\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t k = 0; k < ds.x.cols(); ++k) os << format_double(ds.x.at(i, k)) << ',';
    os << ds.labels[i] << ',' << ds.domain << '\n';
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

inline Dataset read_dataset_csv(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path);
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error(path + ": empty file");
  std::size_t d = 0;
  {
    std::stringstream hs(line);
    std::string cell;
    std::vector<std::string> cols;
    while (std::getline(hs, cell, ',')) cols.push_back(cell);
    if (cols.size() < 3 || cols[cols.size() - 2] != "label" || cols.back() != "domain")
      throw std::runtime_error(path + ": header must be feat_0..feat_{d-1},label,domain");
    d = cols.size() - 2;
    for (std::size_t k = 0; k < d; ++k)
      if (cols[k] != "feat_" + std::to_string(k))
        throw std::runtime_error(path + ": unexpected header column " + cols[k]);
  }
  Dataset ds;
  std::vector<double> flat;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ls(line);
    std::string cell;
    for (std::size_t k = 0; k < d; ++k) {
      if (!std::getline(ls, cell, ','))
        throw std::runtime_error(path + ":" + std::to_string(lineno) + ": too few columns");
      flat.push_back(std::stod(cell));
    }
    if (!std::getline(ls, cell, ','))
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": missing label");
    ds.labels.push_back(std::stoul(cell));
    if (!std::getline(ls, cell)) throw std::runtime_error(path + ":" + std::to_string(lineno) + ": missing domain");
    ds.domain = cell;
  }
  ds.x = Tensor({ds.labels.size(), d}, std::move(flat));
  return ds;
}

// ---------------------------------------------------------------------------
// Sampling

/// Draws batches whose classes are uniform over the represented classes:
/// each slot picks a class uniformly, then a member of that class uniformly
/// (with replacement).
class BalancedSampler {
 public:
  BalancedSampler(const std::vector<std::size_t>& labels, std::size_t classes,
                  std::size_t batch_size, std::uint64_t seed)
      : batch_(batch_size), rng_(seed) {
    if (batch_size == 0) throw std::invalid_argument("sampler: batch size must be positive");
    update_labels(labels, classes);
  }

  /// Rebuilds the class index, keeping the random stream.
  void update_labels(const std::vector<std::size_t>& labels, std::size_t classes) {
    if (labels.empty()) throw std::invalid_argument("sampler: empty dataset");
    members_.assign(classes, {});
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] >= classes) throw std::out_of_range("sampler: label out of range");
      members_[labels[i]].push_back(i);
    }
    present_.clear();
    skipped_.clear();
    for (std::size_t c = 0; c < classes; ++c) (members_[c].empty() ? skipped_ : present_).push_back(c);
  }

  std::vector<std::size_t> next() {
    std::vector<std::size_t> out(batch_);
    for (std::size_t& idx : out) {
      const std::size_t c = present_[pick(present_.size())];
      const auto& m = members_[c];
      idx = m[pick(m.size())];
    }
    return out;
  }

  /// Classes without any sample, excluded from balancing.
  const std::vector<std::size_t>& skipped_classes() const { return skipped_; }
  std::size_t batch_size() const { return batch_; }

 private:
  std::size_t pick(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng_);
  }

  std::size_t batch_;
  std::mt19937_64 rng_;
  std::vector<std::vector<std::size_t>> members_;
  std::vector<std::size_t> present_;
  std::vector<std::size_t> skipped_;
};

// ---------------------------------------------------------------------------
// Pseudo labels

struct PseudoLabelTable {
  std::vector<std::size_t> label;
  std::vector<double> confidence;
  std::uint64_t refreshed_at = 0;

  std::size_t size() const { return label.size(); }
};

/// Class probabilities for every row of x. Rows whose penultimate activation
/// is exactly zero have no direction; they are classified by the head bias.
inline Tensor predict_probs(const Model& m, const Tensor& x, Mode mode = Mode::eval) {
  ad::Graph g;
  BoundModel bm = bind(g, m, false);
  Tensor z = extract(bm, g.constant(x), {mode, nullptr}).value();
  for (std::size_t i = 0; i < z.rows(); ++i) {
    const double n = norm2(z.row(i));
    if (n > 0.0)
      for (double& v : z.row(i)) v /= n;
  }
  return ad::softmax_rows(head_logits(bm, g.constant(z)), m.head.temperature).value();
}

inline PseudoLabelTable refresh_pseudo_labels(const Model& m, const Tensor& target_x,
                                              std::uint64_t step) {
  const Tensor p = predict_probs(m, target_x);
  PseudoLabelTable t;
  t.refreshed_at = step;
  t.label.resize(p.rows());
  t.confidence.resize(p.rows());
  for (std::size_t i = 0; i < p.rows(); ++i) {
    auto row = p.row(i);
    const auto it = std::max_element(row.begin(), row.end());
    t.label[i] = static_cast<std::size_t>(it - row.begin());
    t.confidence[i] = *it;
  }
  return t;
}

/// True at steps 0, interval, 2 interval, ...
inline bool refresh_due(std::uint64_t step, std::uint64_t interval) {
  return interval > 0 && step % interval == 0;
}

}  // namespace apa
