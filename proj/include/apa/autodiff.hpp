#pragma once

// Define-by-run reverse-mode differentiation over dense tensors.
//
// A Graph owns every node created while evaluating an expression. Nodes are
// appended in evaluation order, so index order is a topological order and
// backward() simply walks the node list from the loss down to index 0.
// A Graph is meant to be built, differentiated once and discarded.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <stdexcept>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "apa/tensor.hpp"

namespace apa::ad {

class Graph;

/// Handle to a node in a Graph.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, const Tensor& upstream)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Differentiable input.
  Var leaf(Tensor value) { return push(std::move(value), true, nullptr); }

  /// Input that never receives a gradient.
  Var constant(Tensor value) { return push(std::move(value), false, nullptr); }

  /// Records an operation result. The node requires a gradient when any of
  /// its inputs does; otherwise the backward function is dropped.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    bool needs = false;
    for (const Var& in : inputs) {
      check_owner(in);
      needs = needs || nodes_[in.id].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(fn) : nullptr);
  }

  const Tensor& value(Var v) const {
    check_owner(v);
    return nodes_[v.id].value;
  }

  bool requires_grad(Var v) const {
    check_owner(v);
    return nodes_[v.id].requires_grad;
  }

  /// Gradient accumulated by the last backward(); zeros if the node was not
  /// reached.
  Tensor grad(Var v) const {
    check_owner(v);
    const Node& n = nodes_[v.id];
    if (n.grad.empty() && !n.value.empty()) return Tensor(n.value.shape());
    return n.grad;
  }

  /// Mutable gradient accumulator for node `v`, zero-initialized on first use.
  /// Only meaningful inside backward functions.
  Tensor& grad_slot(Var v) {
    Node& n = nodes_[v.id];
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }

  bool wants_grad(Var v) const { return nodes_[v.id].requires_grad; }

  void backward(Var loss) {
    check_owner(loss);
    if (nodes_[loss.id].value.size() != 1) {
      throw DimensionMismatch("backward: loss must be a scalar, got shape " +
                              shape_string(nodes_[loss.id].value.shape()));
    }
    for (Node& n : nodes_) n.grad = Tensor();
    grad_slot(loss)[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
      n.backward(*this, n.grad);
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Tensor value, bool requires_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Tensor(), requires_grad,
                          std::move(fn)});
    return Var{this, nodes_.size() - 1};
  }

  void check_owner(Var v) const {
    if (v.graph != this || v.id >= nodes_.size()) {
      throw std::logic_error("autodiff: variable belongs to another graph");
    }
  }

  // A deque keeps node addresses stable, so references returned by value()
  // stay valid while the graph grows.
  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return graph->value(*this); }

namespace detail {

inline Graph& graph_of(Var a, Var b) {
  if (a.graph != b.graph) {
    throw std::logic_error("autodiff: operands from different graphs");
  }
  return *a.graph;
}

inline void require_same_shape(Var a, Var b, const char* op) {
  a.value().require_same(b.value(), op);
}

inline void require_finite(const Tensor& t, const char* op) {
  if (!t.all_finite()) {
    throw DegenerateInput(std::string(op) + ": non-finite value");
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(Var a, Var b) {
  Graph& g = detail::graph_of(a, b);
  detail::require_same_shape(a, b, "add");
  return g.record(a.value() + b.value(), {a, b},
                  [a, b](Graph& g, const Tensor& up) {
                    if (g.wants_grad(a)) g.grad_slot(a) += up;
                    if (g.wants_grad(b)) g.grad_slot(b) += up;
                  });
}

inline Var sub(Var a, Var b) {
  Graph& g = detail::graph_of(a, b);
  detail::require_same_shape(a, b, "sub");
  return g.record(a.value() - b.value(), {a, b},
                  [a, b](Graph& g, const Tensor& up) {
                    if (g.wants_grad(a)) g.grad_slot(a) += up;
                    if (g.wants_grad(b)) g.grad_slot(b) -= up;
                  });
}

inline Var mul(Var a, Var b) {
  Graph& g = detail::graph_of(a, b);
  detail::require_same_shape(a, b, "mul");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return g.record(std::move(out), {a, b}, [a, b](Graph& g, const Tensor& up) {
    const Tensor& av = g.value(a);
    const Tensor& bv = g.value(b);
    if (g.wants_grad(a)) {
      Tensor& ga = g.grad_slot(a);
      for (std::size_t i = 0; i < up.size(); ++i) ga[i] += up[i] * bv[i];
    }
    if (g.wants_grad(b)) {
      Tensor& gb = g.grad_slot(b);
      for (std::size_t i = 0; i < up.size(); ++i) gb[i] += up[i] * av[i];
    }
  });
}

inline Var scale(Var a, double s) {
  Graph& g = *a.graph;
  return g.record(a.value() * s, {a}, [a, s](Graph& g, const Tensor& up) {
    Tensor& ga = g.grad_slot(a);
    for (std::size_t i = 0; i < up.size(); ++i) ga[i] += s * up[i];
  });
}

/// max(x, 0); the subgradient at exactly 0 is 0.
inline Var relu(Var a) {
  Graph& g = *a.graph;
  Tensor out = a.value();
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return g.record(std::move(out), {a}, [a](Graph& g, const Tensor& up) {
    const Tensor& x = g.value(a);
    Tensor& ga = g.grad_slot(a);
    for (std::size_t i = 0; i < up.size(); ++i) {
      if (x[i] > 0.0) ga[i] += up[i];
    }
  });
}

/// Natural log; every entry must be strictly positive.
inline Var log(Var a) {
  Graph& g = *a.graph;
  Tensor out = a.value();
  for (double& v : out.values()) {
    if (!(v > 0.0)) throw DegenerateInput("log: non-positive argument");
    v = std::log(v);
  }
  return g.record(std::move(out), {a}, [a](Graph& g, const Tensor& up) {
    const Tensor& x = g.value(a);
    Tensor& ga = g.grad_slot(a);
    for (std::size_t i = 0; i < up.size(); ++i) ga[i] += up[i] / x[i];
  });
}

inline Var exp(Var a) {
  Graph& g = *a.graph;
  Tensor out = a.value();
  for (double& v : out.values()) v = std::exp(v);
  const Var self{&g, g.size()};
  return g.record(std::move(out), {a}, [a, self](Graph& g, const Tensor& up) {
    const Tensor& y = g.value(self);
    Tensor& ga = g.grad_slot(a);
    for (std::size_t i = 0; i < up.size(); ++i) ga[i] += up[i] * y[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Var sum(Var a) {
  Graph& g = *a.graph;
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return g.record(Tensor::scalar(s), {a}, [a](Graph& g, const Tensor& up) {
    Tensor& ga = g.grad_slot(a);
    for (double& v : ga.values()) v += up[0];
  });
}

inline Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw DimensionMismatch("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

/// Per-row sum: [n x m] -> [n]; a rank-1 input yields [1].
inline Var row_sum(Var a) {
  Graph& g = *a.graph;
  const Tensor& x = a.value();
  const std::size_t n = x.rows(), m = x.cols();
  Tensor out({n});
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < m; ++c) s += x.at(r, c);
    out[r] = s;
  }
  return g.record(std::move(out), {a}, [a, n, m](Graph& g, const Tensor& up) {
    Tensor& ga = g.grad_slot(a);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < m; ++c) ga[r * m + c] += up[r];
  });
}

/// Per-column mean: [n x m] -> [m].
inline Var col_mean(Var a) {
  Graph& g = *a.graph;
  const Tensor& x = a.value();
  const std::size_t n = x.rows(), m = x.cols();
  if (n == 0) throw DimensionMismatch("col_mean: no rows");
  Tensor out({m});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c) out[c] += x.at(r, c);
  for (double& v : out.values()) v /= static_cast<double>(n);
  return g.record(std::move(out), {a}, [a, n, m](Graph& g, const Tensor& up) {
    Tensor& ga = g.grad_slot(a);
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < m; ++c) ga[r * m + c] += up[c] * inv;
  });
}

/// out[i] = x[i, index[i]].
inline Var pick(Var a, std::vector<std::size_t> index) {
  Graph& g = *a.graph;
  const Tensor& x = a.value();
  const std::size_t n = x.rows(), m = x.cols();
  if (index.size() != n) throw DimensionMismatch("pick: index count");
  Tensor out({n});
  for (std::size_t r = 0; r < n; ++r) {
    if (index[r] >= m) throw std::out_of_range("pick: class index");
    out[r] = x.at(r, index[r]);
  }
  return g.record(std::move(out), {a},
                  [a, m, index = std::move(index)](Graph& g, const Tensor& up) {
                    Tensor& ga = g.grad_slot(a);
                    for (std::size_t r = 0; r < index.size(); ++r)
                      ga[r * m + index[r]] += up[r];
                  });
}

// ---------------------------------------------------------------------------
// Linear algebra and broadcasting

/// X W^T: [n x k] times [m x k]^T -> [n x m]. A rank-1 X yields rank-1 output,
/// which makes this the matrix-vector product as well.
inline Var linear(Var x, Var w) {
  Graph& g = detail::graph_of(x, w);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (wv.rank() != 2 || xv.cols() != wv.cols()) {
    throw DimensionMismatch("linear: " + shape_string(xv.shape()) + " by " +
                            shape_string(wv.shape()) + "^T");
  }
  const std::size_t n = xv.rows(), k = xv.cols(), m = wv.rows();
  Tensor out(xv.rank() == 1 ? Shape{m} : Shape{n, m});
  for (std::size_t r = 0; r < n; ++r) {
    const double* xr = &xv.values()[r * k];
    for (std::size_t o = 0; o < m; ++o) {
      const double* wr = &wv.values()[o * k];
      double s = 0.0;
      for (std::size_t j = 0; j < k; ++j) s += xr[j] * wr[j];
      out[r * m + o] = s;
    }
  }
  return g.record(std::move(out), {x, w},
                  [x, w, n, k, m](Graph& g, const Tensor& up) {
                    const Tensor& xv = g.value(x);
                    const Tensor& wv = g.value(w);
                    if (g.wants_grad(x)) {
                      Tensor& gx = g.grad_slot(x);
                      for (std::size_t r = 0; r < n; ++r)
                        for (std::size_t o = 0; o < m; ++o) {
                          const double u = up[r * m + o];
                          if (u == 0.0) continue;
                          for (std::size_t j = 0; j < k; ++j)
                            gx[r * k + j] += u * wv[o * k + j];
                        }
                    }
                    if (g.wants_grad(w)) {
                      Tensor& gw = g.grad_slot(w);
                      for (std::size_t r = 0; r < n; ++r)
                        for (std::size_t o = 0; o < m; ++o) {
                          const double u = up[r * m + o];
                          if (u == 0.0) continue;
                          for (std::size_t j = 0; j < k; ++j)
                            gw[o * k + j] += u * xv[r * k + j];
                        }
                    }
                  });
}

/// X + b broadcast over rows: [n x m] + [m].
inline Var add_row(Var x, Var b) {
  Graph& g = detail::graph_of(x, b);
  const Tensor& xv = x.value();
  const Tensor& bv = b.value();
  const std::size_t n = xv.rows(), m = xv.cols();
  if (bv.size() != m) throw DimensionMismatch("add_row: bias length");
  Tensor out = xv;
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c) out[r * m + c] += bv[c];
  return g.record(std::move(out), {x, b}, [x, b, n, m](Graph& g,
                                                       const Tensor& up) {
    if (g.wants_grad(x)) g.grad_slot(x) += up;
    if (g.wants_grad(b)) {
      Tensor& gb = g.grad_slot(b);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) gb[c] += up[r * m + c];
    }
  });
}

/// X * s broadcast over rows: [n x m] * [m].
inline Var mul_row(Var x, Var s) {
  Graph& g = detail::graph_of(x, s);
  const Tensor& xv = x.value();
  const Tensor& sv = s.value();
  const std::size_t n = xv.rows(), m = xv.cols();
  if (sv.size() != m) throw DimensionMismatch("mul_row: scale length");
  Tensor out = xv;
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c) out[r * m + c] *= sv[c];
  return g.record(std::move(out), {x, s}, [x, s, n, m](Graph& g,
                                                       const Tensor& up) {
    const Tensor& xv = g.value(x);
    const Tensor& sv = g.value(s);
    if (g.wants_grad(x)) {
      Tensor& gx = g.grad_slot(x);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) gx[r * m + c] += up[r * m + c] * sv[c];
    }
    if (g.wants_grad(s)) {
      Tensor& gs = g.grad_slot(s);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) gs[c] += up[r * m + c] * xv[r * m + c];
    }
  });
}

/// Scales row i of X by w[i]: [n x m] * [n].
inline Var scale_rows(Var x, Var w) {
  Graph& g = detail::graph_of(x, w);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const std::size_t n = xv.rows(), m = xv.cols();
  if (wv.size() != n) throw DimensionMismatch("scale_rows: weight count");
  Tensor out = xv;
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c) out[r * m + c] *= wv[r];
  return g.record(std::move(out), {x, w}, [x, w, n, m](Graph& g,
                                                       const Tensor& up) {
    const Tensor& xv = g.value(x);
    const Tensor& wv = g.value(w);
    if (g.wants_grad(x)) {
      Tensor& gx = g.grad_slot(x);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) gx[r * m + c] += up[r * m + c] * wv[r];
    }
    if (g.wants_grad(w)) {
      Tensor& gw = g.grad_slot(w);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) gw[r] += up[r * m + c] * xv[r * m + c];
    }
  });
}

// ---------------------------------------------------------------------------
// Row-wise nonlinear maps

/// Row-wise l2 normalization v / ||v||. Backward applies
/// J(v) = (I - v v^T / v^T v) / ||v||. A zero row is a degenerate input.
inline Var normalize_rows(Var a) {
  Graph& g = *a.graph;
  const Tensor& x = a.value();
  const std::size_t n = x.rows(), m = x.cols();
  Tensor out = x;
  std::vector<double> norms(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double nr = norm2(x.row(r));
    if (!(nr > 0.0) || !std::isfinite(nr)) {
      throw DegenerateInput("normalize_l2: zero-norm row " + std::to_string(r));
    }
    norms[r] = nr;
    for (double& v : out.row(r)) v /= nr;
  }
  const Var self{&g, g.size()};
  return g.record(std::move(out), {a},
                  [a, self, n, m, norms = std::move(norms)](Graph& g,
                                                            const Tensor& up) {
                    const Tensor& y = g.value(self);
                    Tensor& ga = g.grad_slot(a);
                    for (std::size_t r = 0; r < n; ++r) {
                      double proj = 0.0;
                      for (std::size_t c = 0; c < m; ++c)
                        proj += y[r * m + c] * up[r * m + c];
                      for (std::size_t c = 0; c < m; ++c)
                        ga[r * m + c] +=
                            (up[r * m + c] - proj * y[r * m + c]) / norms[r];
                    }
                  });
}

/// Single-vector form of normalize_rows.
inline Var normalize_l2(Var v) { return normalize_rows(v); }

/// Row-wise log softmax of x / T with max subtraction.
inline Var log_softmax_rows(Var a, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("softmax: T must be > 0");
  Graph& g = *a.graph;
  const Tensor& x = a.value();
  detail::require_finite(x, "log_softmax");
  const std::size_t n = x.rows(), m = x.cols();
  Tensor out(x.shape());
  for (std::size_t r = 0; r < n; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < m; ++c) mx = std::max(mx, x.at(r, c) / temperature);
    double s = 0.0;
    for (std::size_t c = 0; c < m; ++c) s += std::exp(x.at(r, c) / temperature - mx);
    const double lse = mx + std::log(s);
    for (std::size_t c = 0; c < m; ++c) out.at(r, c) = x.at(r, c) / temperature - lse;
  }
  const Var self{&g, g.size()};
  return g.record(std::move(out), {a},
                  [a, self, n, m, temperature](Graph& g, const Tensor& up) {
                    const Tensor& y = g.value(self);
                    Tensor& ga = g.grad_slot(a);
                    for (std::size_t r = 0; r < n; ++r) {
                      double total = 0.0;
                      for (std::size_t c = 0; c < m; ++c) total += up[r * m + c];
                      for (std::size_t c = 0; c < m; ++c)
                        ga[r * m + c] += (up[r * m + c] -
                                          std::exp(y[r * m + c]) * total) /
                                         temperature;
                    }
                  });
}

/// Row-wise softmax of x / T; rows sum to one.
inline Var softmax_rows(Var a, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("softmax: T must be > 0");
  Graph& g = *a.graph;
  const Tensor& x = a.value();
  detail::require_finite(x, "softmax");
  const std::size_t n = x.rows(), m = x.cols();
  Tensor out(x.shape());
  for (std::size_t r = 0; r < n; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < m; ++c) mx = std::max(mx, x.at(r, c) / temperature);
    double s = 0.0;
    for (std::size_t c = 0; c < m; ++c) {
      out.at(r, c) = std::exp(x.at(r, c) / temperature - mx);
      s += out.at(r, c);
    }
    for (std::size_t c = 0; c < m; ++c) out.at(r, c) /= s;
  }
  const Var self{&g, g.size()};
  return g.record(std::move(out), {a},
                  [a, self, n, m, temperature](Graph& g, const Tensor& up) {
                    const Tensor& y = g.value(self);
                    Tensor& ga = g.grad_slot(a);
                    for (std::size_t r = 0; r < n; ++r) {
                      double inner = 0.0;
                      for (std::size_t c = 0; c < m; ++c)
                        inner += up[r * m + c] * y[r * m + c];
                      for (std::size_t c = 0; c < m; ++c)
                        ga[r * m + c] +=
                            y[r * m + c] * (up[r * m + c] - inner) / temperature;
                    }
                  });
}

inline Var softmax_temp(Var logits, double temperature) {
  return softmax_rows(logits, temperature);
}

/// Row-wise KL(p || q) = sum_c p_c log(p_c / q_c) with 0 log 0 = 0.
/// Differentiable in both arguments. q_c = 0 where p_c > 0 is reported as a
/// degenerate input instead of returning infinity.
inline Var kl_rows(Var p, Var q) {
  Graph& g = detail::graph_of(p, q);
  detail::require_same_shape(p, q, "kl_divergence");
  const Tensor& pv = p.value();
  const Tensor& qv = q.value();
  const std::size_t n = pv.rows(), m = pv.cols();
  Tensor out({n});
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < m; ++c) {
      const double pc = pv.at(r, c), qc = qv.at(r, c);
      if (pc < 0.0 || qc < 0.0) throw DegenerateInput("kl_divergence: negative probability");
      if (pc == 0.0) continue;
      if (qc == 0.0) {
        throw DegenerateInput("kl_divergence: q is zero where p is positive");
      }
      s += pc * std::log(pc / qc);
    }
    out[r] = s;
  }
  return g.record(std::move(out), {p, q}, [p, q, n, m](Graph& g,
                                                       const Tensor& up) {
    const Tensor& pv = g.value(p);
    const Tensor& qv = g.value(q);
    if (g.wants_grad(p)) {
      Tensor& gp = g.grad_slot(p);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) {
          const double pc = pv.at(r, c);
          if (pc > 0.0)
            gp[r * m + c] += up[r] * (std::log(pc / qv.at(r, c)) + 1.0);
        }
    }
    if (g.wants_grad(q)) {
      Tensor& gq = g.grad_slot(q);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) {
          const double pc = pv.at(r, c);
          if (pc > 0.0) gq[r * m + c] -= up[r] * pc / qv.at(r, c);
        }
    }
  });
}

/// Scalar KL for a single pair of probability vectors.
inline Var kl_divergence(Var p, Var q) { return sum(kl_rows(p, q)); }

/// Row-wise KL(p || softmax(logits / T)) computed from log-probabilities, so
/// sharp temperatures never underflow q to zero. `log_p` and `log_q` are
/// log-softmax outputs.
inline Var kl_from_log_probs(Var log_p, Var log_q) {
  Graph& g = detail::graph_of(log_p, log_q);
  detail::require_same_shape(log_p, log_q, "kl_from_log_probs");
  const Tensor& lp = log_p.value();
  const Tensor& lq = log_q.value();
  const std::size_t n = lp.rows(), m = lp.cols();
  Tensor out({n});
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < m; ++c) {
      const double pc = std::exp(lp.at(r, c));
      if (pc == 0.0) continue;
      s += pc * (lp.at(r, c) - lq.at(r, c));
    }
    out[r] = s;
  }
  return g.record(std::move(out), {log_p, log_q},
                  [log_p, log_q, n, m](Graph& g, const Tensor& up) {
                    const Tensor& lp = g.value(log_p);
                    const Tensor& lq = g.value(log_q);
                    for (std::size_t r = 0; r < n; ++r)
                      for (std::size_t c = 0; c < m; ++c) {
                        const double pc = std::exp(lp.at(r, c));
                        if (g.wants_grad(log_p))
                          g.grad_slot(log_p)[r * m + c] +=
                              up[r] * pc * (lp.at(r, c) - lq.at(r, c) + 1.0);
                        if (g.wants_grad(log_q))
                          g.grad_slot(log_q)[r * m + c] -= up[r] * pc;
                      }
                  });
}

/// Column standardization with batch statistics:
/// (x - mean_batch) / sqrt(var_batch + eps), biased variance.
inline Var standardize_cols(Var a, double eps) {
  Graph& g = *a.graph;
  const Tensor& x = a.value();
  const std::size_t n = x.rows(), m = x.cols();
  if (n == 0) throw DimensionMismatch("standardize: empty batch");
  std::vector<double> mu(m, 0.0), inv_std(m, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c) mu[c] += x.at(r, c);
  for (double& v : mu) v /= static_cast<double>(n);
  for (std::size_t c = 0; c < m; ++c) {
    double var = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      const double d = x.at(r, c) - mu[c];
      var += d * d;
    }
    var /= static_cast<double>(n);
    inv_std[c] = 1.0 / std::sqrt(var + eps);
  }
  Tensor out(x.shape());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c)
      out.at(r, c) = (x.at(r, c) - mu[c]) * inv_std[c];
  const Var self{&g, g.size()};
  return g.record(
      std::move(out), {a},
      [a, self, n, m, inv_std = std::move(inv_std)](Graph& g, const Tensor& up) {
        const Tensor& y = g.value(self);
        Tensor& ga = g.grad_slot(a);
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t c = 0; c < m; ++c) {
          double sum_up = 0.0, sum_up_y = 0.0;
          for (std::size_t r = 0; r < n; ++r) {
            sum_up += up[r * m + c];
            sum_up_y += up[r * m + c] * y[r * m + c];
          }
          for (std::size_t r = 0; r < n; ++r) {
            ga[r * m + c] += inv_std[c] * (up[r * m + c] - sum_up * inv_n -
                                           y[r * m + c] * sum_up_y * inv_n);
          }
        }
      });
}

// Operator sugar for readability in loss code.
inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(Var a, double s) { return scale(a, s); }
inline Var operator*(double s, Var a) { return scale(a, s); }

}  // namespace apa::ad
