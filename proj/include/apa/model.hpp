#pragma once

// Classifier h = g o f. The feature extractor f is a stack of dense blocks
// (affine -> feature standardization -> ReLU); the last block is the
// bottleneck whose output z is the penultimate activation. The head g is a
// single affine map applied to the l2-normalized activation, followed by a
// temperature softmax.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "apa/autodiff.hpp"

namespace apa {

enum class Mode { train, eval };

/// Whether the head sees z / ||z|| (the default) or z itself.
enum class Pathway { normalized, unnormalized };

struct DenseBlock {
  Tensor weight;  // [out x in]
  Tensor bias;    // [out]
  Tensor gamma;   // [out]
  Tensor beta;    // [out]
  Tensor running_mean;
  Tensor running_var;

  std::size_t in_dim() const { return weight.cols(); }
  std::size_t out_dim() const { return weight.rows(); }
};

struct FeatureExtractor {
  std::vector<DenseBlock> blocks;
  /// Block boundary separating f^a (blocks before it) from f^b.
  std::size_t split_index = 0;

  std::size_t input_dim() const { return blocks.front().in_dim(); }
  std::size_t output_dim() const { return blocks.back().out_dim(); }
  std::size_t depth() const { return blocks.size(); }
};

struct LinearClassifier {
  Tensor weight;  // [C x d]
  Tensor bias;    // [C]
  double temperature = 0.05;

  std::size_t classes() const { return weight.rows(); }
  std::size_t dim() const { return weight.cols(); }
};

struct ModelShape {
  std::size_t input_dim = 8;
  std::vector<std::size_t> hidden = {32, 32};
  std::size_t bottleneck = 16;
  std::size_t classes = 4;
};

struct Model {
  FeatureExtractor features;
  LinearClassifier head;
  std::uint64_t seed = 0;
  double stats_momentum = 0.9;
  double stats_eps = 1e-5;

  static Model initialize(const ModelShape& shape, std::uint64_t seed,
                          double temperature) {
    Model m;
    m.seed = seed;
    std::mt19937_64 rng(seed);
    auto uniform = [&rng](Shape s, std::size_t fan_in) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      std::uniform_real_distribution<double> dist(-bound, bound);
      Tensor t(std::move(s));
      for (double& v : t.values()) v = dist(rng);
      return t;
    };
    std::vector<std::size_t> widths = shape.hidden;
    widths.push_back(shape.bottleneck);
    std::size_t in = shape.input_dim;
    for (std::size_t out : widths) {
      DenseBlock b;
      b.weight = uniform({out, in}, in);
      b.bias = uniform({out}, in);
      b.gamma = Tensor({out}, 1.0);
      b.beta = Tensor({out}, 0.0);
      b.running_mean = Tensor({out}, 0.0);
      b.running_var = Tensor({out}, 1.0);
      m.features.blocks.push_back(std::move(b));
      in = out;
    }
    m.features.split_index = m.features.blocks.size() / 2;
    m.head.weight = uniform({shape.classes, shape.bottleneck}, shape.bottleneck);
    m.head.bias = uniform({shape.classes}, shape.bottleneck);
    m.head.temperature = temperature;
    return m;
  }

  /// Trainable tensors in a fixed order: per block weight, bias, gamma, beta;
  /// then head weight and bias.
  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    for (DenseBlock& b : features.blocks) {
      out.insert(out.end(), {&b.weight, &b.bias, &b.gamma, &b.beta});
    }
    out.push_back(&head.weight);
    out.push_back(&head.bias);
    return out;
  }

  std::vector<const Tensor*> parameters() const {
    std::vector<const Tensor*> out;
    for (const Tensor* t : const_cast<Model*>(this)->parameters()) out.push_back(t);
    return out;
  }

  /// Index of the first head tensor within parameters().
  std::size_t head_offset() const { return 4 * features.blocks.size(); }

  std::size_t classes() const { return head.classes(); }
  std::size_t input_dim() const { return features.input_dim(); }
  std::size_t penultimate_dim() const { return features.output_dim(); }
};

/// FNV-1a over every parameter and running statistic; used to assert that
/// probes leave a model untouched.
inline std::uint64_t parameter_hash(const Model& m) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const Tensor& t) {
    for (double v : t.values()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      for (int i = 0; i < 8; ++i) {
        h ^= (bits >> (8 * i)) & 0xffU;
        h *= 1099511628211ULL;
      }
    }
  };
  for (const DenseBlock& b : m.features.blocks) {
    for (const Tensor* t : {&b.weight, &b.bias, &b.gamma, &b.beta,
                            &b.running_mean, &b.running_var})
      mix(*t);
  }
  mix(m.head.weight);
  mix(m.head.bias);
  return h;
}

// ---------------------------------------------------------------------------
// Graph binding and forward passes

struct BoundBlock {
  ad::Var weight, bias, gamma, beta;
};

/// Model parameters as nodes of one graph; `params` follows
/// Model::parameters() order.
struct BoundModel {
  const Model* model = nullptr;
  std::vector<BoundBlock> blocks;
  ad::Var head_weight, head_bias;
  std::vector<ad::Var> params;
};

inline BoundModel bind(ad::Graph& g, const Model& m, bool trainable = true) {
  BoundModel bm;
  bm.model = &m;
  auto make = [&](const Tensor& t) {
    ad::Var v = trainable ? g.leaf(t) : g.constant(t);
    bm.params.push_back(v);
    return v;
  };
  for (const DenseBlock& b : m.features.blocks) {
    BoundBlock bb;
    bb.weight = make(b.weight);
    bb.bias = make(b.bias);
    bb.gamma = make(b.gamma);
    bb.beta = make(b.beta);
    bm.blocks.push_back(bb);
  }
  bm.head_weight = make(m.head.weight);
  bm.head_bias = make(m.head.bias);
  return bm;
}

/// Batch mean and variance seen by each block during a training-mode pass.
struct BlockMoments {
  std::vector<double> mean, var;
};

inline BlockMoments column_moments(const Tensor& x) {
  const std::size_t n = x.rows(), m = x.cols();
  BlockMoments mo{std::vector<double>(m, 0.0), std::vector<double>(m, 0.0)};
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c) mo.mean[c] += x.at(r, c);
  for (double& v : mo.mean) v /= static_cast<double>(n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c) {
      const double d = x.at(r, c) - mo.mean[c];
      mo.var[c] += d * d;
    }
  for (double& v : mo.var) v /= static_cast<double>(n);
  return mo;
}

struct ForwardOptions {
  Mode mode = Mode::eval;
  /// When set in training mode, receives one entry per block evaluated.
  std::vector<BlockMoments>* moments = nullptr;
};

/// Applies blocks [from, to) to `x`.
inline ad::Var apply_blocks(const BoundModel& bm, ad::Var x, std::size_t from,
                            std::size_t to, const ForwardOptions& opt = {}) {
  const Model& m = *bm.model;
  if (from > to || to > m.features.depth()) {
    throw std::out_of_range("apply_blocks: invalid block range");
  }
  ad::Graph& g = *x.graph;
  ad::Var h = x;
  for (std::size_t i = from; i < to; ++i) {
    const DenseBlock& blk = m.features.blocks[i];
    const BoundBlock& bb = bm.blocks[i];
    if (h.value().cols() != blk.in_dim()) {
      throw DimensionMismatch("block " + std::to_string(i) + ": input width " +
                              std::to_string(h.value().cols()) + ", expected " +
                              std::to_string(blk.in_dim()));
    }
    ad::Var a = ad::add_row(ad::linear(h, bb.weight), bb.bias);
    ad::Var s;
    if (opt.mode == Mode::train) {
      if (opt.moments) opt.moments->push_back(column_moments(a.value()));
      s = ad::standardize_cols(a, m.stats_eps);
    } else {
      const std::size_t w = blk.out_dim();
      Tensor inv_std({w}), shift({w});
      for (std::size_t c = 0; c < w; ++c) {
        inv_std[c] = 1.0 / std::sqrt(blk.running_var[c] + m.stats_eps);
        shift[c] = -blk.running_mean[c] * inv_std[c];
      }
      s = ad::add_row(ad::mul_row(a, g.constant(inv_std)), g.constant(shift));
    }
    h = ad::relu(ad::add_row(ad::mul_row(s, bb.gamma), bb.beta));
  }
  return h;
}

/// Penultimate activation z = f(x).
inline ad::Var extract(const BoundModel& bm, ad::Var x,
                       const ForwardOptions& opt = {}) {
  if (x.value().cols() != bm.model->input_dim()) {
    throw DimensionMismatch("forward: input width " +
                            std::to_string(x.value().cols()) + ", model expects " +
                            std::to_string(bm.model->input_dim()));
  }
  return apply_blocks(bm, x, 0, bm.model->features.depth(), opt);
}

/// Head logits W u + B for an activation u that is already in the space the
/// head consumes (normalized or not; see classify()).
inline ad::Var head_logits(const BoundModel& bm, ad::Var u) {
  return ad::add_row(ad::linear(u, bm.head_weight), bm.head_bias);
}

/// Logits for activation z along the chosen pathway.
inline ad::Var classify(const BoundModel& bm, ad::Var z,
                        Pathway pathway = Pathway::normalized) {
  return head_logits(bm, pathway == Pathway::normalized ? ad::normalize_rows(z) : z);
}

/// Folds the batch moments of a training pass into the running statistics:
/// running = momentum * running + (1 - momentum) * batch.
inline void update_running_stats(Model& m, const std::vector<BlockMoments>& mo) {
  const double k = m.stats_momentum;
  for (std::size_t i = 0; i < mo.size() && i < m.features.depth(); ++i) {
    DenseBlock& b = m.features.blocks[i];
    for (std::size_t c = 0; c < b.out_dim(); ++c) {
      b.running_mean[c] = k * b.running_mean[c] + (1.0 - k) * mo[i].mean[c];
      b.running_var[c] = k * b.running_var[c] + (1.0 - k) * mo[i].var[c];
    }
  }
}

// ---------------------------------------------------------------------------
// Value-level API

/// Penultimate activations of a batch: z, z / ||z|| and ||z|| per row.
struct ActivationRecord {
  Tensor z;
  Tensor z_norm;
  std::vector<double> norm;
};

inline ActivationRecord make_activation_record(const Tensor& z) {
  ActivationRecord rec{z, z, std::vector<double>(z.rows())};
  for (std::size_t r = 0; r < z.rows(); ++r) {
    const double n = norm2(z.row(r));
    if (!(n > 0.0)) {
      throw DegenerateInput("activation record: zero activation in row " +
                            std::to_string(r));
    }
    rec.norm[r] = n;
    for (double& v : rec.z_norm.row(r)) v /= n;
  }
  return rec;
}

struct FullForward {
  ActivationRecord activation;
  Tensor probs;
};

/// z = f(x) and probs = softmax((W z/||z|| + B) / T).
inline FullForward forward_full(const Model& m, const Tensor& x,
                                Mode mode = Mode::eval) {
  ad::Graph g;
  BoundModel bm = bind(g, m, false);
  ForwardOptions opt{mode, nullptr};
  ad::Var z = extract(bm, g.constant(x), opt);
  ad::Var p = ad::softmax_rows(classify(bm, z), m.head.temperature);
  return {make_activation_record(z.value()), p.value()};
}

struct SplitForward {
  Tensor intermediate;  // f^a(x)
  Tensor z;             // f^b(f^a(x))
};

/// Evaluates f^a and f^b separately at `split` (0 .. depth). Split 0 makes
/// f^a the identity; split == depth makes f^b the identity.
inline SplitForward forward_split(const Model& m, const Tensor& x,
                                  std::size_t split, Mode mode = Mode::eval) {
  if (split > m.features.depth()) {
    throw std::out_of_range("forward_split: split index " + std::to_string(split) +
                            " exceeds depth " + std::to_string(m.features.depth()));
  }
  if (x.cols() != m.input_dim()) {
    throw DimensionMismatch("forward_split: input width mismatch");
  }
  ad::Graph g;
  BoundModel bm = bind(g, m, false);
  ForwardOptions opt{mode, nullptr};
  ad::Var a = apply_blocks(bm, g.constant(x), 0, split, opt);
  Tensor inter = a.value();
  ad::Var z = apply_blocks(bm, g.constant(inter), split, m.features.depth(), opt);
  return {std::move(inter), z.value()};
}

struct DriftResult {
  double mean_cosine = 0.0;
  std::size_t excluded_rows = 0;
};

/// Mean over classifier rows c of cos(W0_c, W_c); rows where either side is
/// zero are excluded and counted.
inline DriftResult classifier_drift(const Tensor& w0, const Tensor& w) {
  w0.require_same(w, "classifier_drift");
  DriftResult res;
  double total = 0.0;
  std::size_t used = 0;
  for (std::size_t r = 0; r < w.rows(); ++r) {
    const double c = cosine(w0.row(r), w.row(r));
    if (std::isnan(c)) {
      ++res.excluded_rows;
      continue;
    }
    total += c;
    ++used;
  }
  res.mean_cosine = used ? total / static_cast<double>(used)
                         : std::numeric_limits<double>::quiet_NaN();
  return res;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline nlohmann::json tensor_to_json(const Tensor& t) {
  return {{"shape", t.shape()}, {"values", t.data()}};
}

inline Tensor tensor_from_json(const nlohmann::json& j) {
  return Tensor(j.at("shape").get<Shape>(), j.at("values").get<std::vector<double>>());
}

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json model_to_json(const Model& m) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const DenseBlock& b : m.features.blocks) {
    blocks.push_back({{"weight", tensor_to_json(b.weight)},
                      {"bias", tensor_to_json(b.bias)},
                      {"gamma", tensor_to_json(b.gamma)},
                      {"beta", tensor_to_json(b.beta)},
                      {"running_mean", tensor_to_json(b.running_mean)},
                      {"running_var", tensor_to_json(b.running_var)}});
  }
  return {{"format", "apa-checkpoint"},
          {"version", kCheckpointVersion},
          {"seed", m.seed},
          {"stats_momentum", m.stats_momentum},
          {"stats_eps", m.stats_eps},
          {"split_index", m.features.split_index},
          {"blocks", blocks},
          {"head",
           {{"weight", tensor_to_json(m.head.weight)},
            {"bias", tensor_to_json(m.head.bias)},
            {"temperature", m.head.temperature}}}};
}

inline Model model_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "apa-checkpoint") {
    throw std::runtime_error("checkpoint: unrecognized format");
  }
  if (j.at("version").get<int>() != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported version " +
                             j.at("version").dump());
  }
  Model m;
  m.seed = j.at("seed").get<std::uint64_t>();
  m.stats_momentum = j.at("stats_momentum").get<double>();
  m.stats_eps = j.at("stats_eps").get<double>();
  m.features.split_index = j.at("split_index").get<std::size_t>();
  for (const auto& jb : j.at("blocks")) {
    DenseBlock b;
    b.weight = tensor_from_json(jb.at("weight"));
    b.bias = tensor_from_json(jb.at("bias"));
    b.gamma = tensor_from_json(jb.at("gamma"));
    b.beta = tensor_from_json(jb.at("beta"));
    b.running_mean = tensor_from_json(jb.at("running_mean"));
    b.running_var = tensor_from_json(jb.at("running_var"));
    m.features.blocks.push_back(std::move(b));
  }
  const auto& jh = j.at("head");
  m.head.weight = tensor_from_json(jh.at("weight"));
  m.head.bias = tensor_from_json(jh.at("bias"));
  m.head.temperature = jh.at("temperature").get<double>();
  return m;
}

inline void save_checkpoint(const Model& m, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path);
  os << model_to_json(m).dump(1) << '\n';
}

inline Model load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read checkpoint " + path);
  return model_from_json(nlohmann::json::parse(is));
}

}  // namespace apa
