#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "apa/tensor.hpp"

namespace apa {

class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SgdConfig {
  double momentum = 0.8;
  double weight_decay = 5e-4;
};

/// One velocity buffer per parameter tensor, created on first use.
struct SgdState {
  std::vector<Tensor> velocity;
};

/// v <- momentum v + g + wd p; p <- p - lr v. Gradients are checked for
/// finiteness before anything is modified. Entries of `skip` mark tensors that
/// are left untouched (velocity included).
inline void sgd_step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads,
                     SgdState& state, double lr, const SgdConfig& cfg,
                     const std::vector<bool>& skip = {}) {
  if (grads.size() != params.size())
    throw DimensionMismatch("sgd: " + std::to_string(grads.size()) + " gradients for " +
                            std::to_string(params.size()) + " parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!grads[i].same_shape(*params[i]))
      throw DimensionMismatch("sgd: gradient " + std::to_string(i) + " has shape " +
                              shape_string(grads[i].shape()) + ", parameter " +
                              shape_string(params[i]->shape()));
    if (!grads[i].all_finite())
      throw NonFiniteGradient("sgd: non-finite gradient in parameter tensor " +
                              std::to_string(i) + "; step aborted");
  }
  if (state.velocity.empty())
    for (const Tensor* p : params) state.velocity.emplace_back(p->shape());
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (i < skip.size() && skip[i]) continue;
    auto p = params[i]->values();
    auto v = state.velocity[i].values();
    auto g = grads[i].values();
    for (std::size_t k = 0; k < p.size(); ++k) {
      v[k] = cfg.momentum * v[k] + g[k] + cfg.weight_decay * p[k];
      p[k] -= lr * v[k];
    }
  }
}

struct LrSchedule {
  double eta0 = 1e-3;
  double gamma = 1e-4;
  double power = 0.75;
};

/// eta0 (1 + gamma i)^(-power).
inline double lr_at(std::uint64_t step, const LrSchedule& s) {
  return s.eta0 * std::pow(1.0 + s.gamma * static_cast<double>(step), -s.power);
}

inline double lr_at(std::uint64_t step, double eta0) { return lr_at(step, LrSchedule{eta0}); }

}  // namespace apa
