#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "apa/autodiff.hpp"

namespace apa::ad {

/// Scalar-valued expression of a single tensor input, built into `g`.
using ScalarFn = std::function<Var(Graph& g, Var input)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  Tensor analytic;
  Tensor numeric;
};

inline double evaluate(const ScalarFn& fn, const Tensor& point) {
  Graph g;
  return fn(g, g.leaf(point)).value()[0];
}

inline Tensor gradient(const ScalarFn& fn, const Tensor& point) {
  Graph g;
  Var x = g.leaf(point);
  g.backward(fn(g, x));
  return g.grad(x);
}

/// Compares the reverse-mode gradient of `fn` at `point` against central
/// differences (fn(x + h e_i) - fn(x - h e_i)) / 2h.
///
/// The error of coordinate i is |a_i - n_i| / max(|a_i|, |n_i|, floor) where
/// floor is 1e-3 of the largest gradient component, and at least `abs_floor`.
/// Coordinates far below the gradient's scale, or exactly zero (a bias that
/// feeds a batch standardization), are judged against that scale instead of
/// their own rounding noise.
inline GradCheckResult finite_diff_check(const ScalarFn& fn,
                                         const Tensor& point, double h,
                                         double abs_floor = 1e-8) {
  GradCheckResult res;
  res.analytic = gradient(fn, point);
  res.numeric = Tensor(point.shape());
  Tensor probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    probe[i] = point[i] + h;
    const double up = evaluate(fn, probe);
    probe[i] = point[i] - h;
    const double down = evaluate(fn, probe);
    probe[i] = point[i];
    res.numeric[i] = (up - down) / (2.0 * h);
  }
  double scale = 0.0;
  for (std::size_t i = 0; i < point.size(); ++i) {
    scale = std::max({scale, std::abs(res.analytic[i]), std::abs(res.numeric[i])});
  }
  const double floor = std::max(1e-3 * scale, abs_floor);
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double a = res.analytic[i], n = res.numeric[i];
    const double err =
        std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
    if (err > res.max_rel_error || !std::isfinite(err)) {
      res.max_rel_error = std::isfinite(err) ? err : HUGE_VAL;
      res.worst_index = i;
    }
  }
  return res;
}

}  // namespace apa::ad
