#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "tagbert/autodiff.hpp"

namespace tagbert {

/// Linear warm-up to peak_lr over warmup_steps, then linear decay to zero at
/// total_steps.
struct Schedule {
  double peak_lr = 1e-4;
  std::size_t warmup_steps = 10000;
  std::size_t total_steps = 100000;

  void validate() const {
    if (!(warmup_steps > 0 && warmup_steps < total_steps))
      throw std::invalid_argument("schedule requires 0 < warmup_steps (" +
                                  std::to_string(warmup_steps) + ") < total_steps (" +
                                  std::to_string(total_steps) + ")");
    if (!(peak_lr >= 0.0)) throw std::invalid_argument("schedule peak_lr must be non-negative");
  }
};

inline double lr_at(const Schedule& s, std::size_t step) {
  if (step > s.total_steps) return 0.0;
  if (step <= s.warmup_steps)
    return s.peak_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  return s.peak_lr * static_cast<double>(s.total_steps - step) /
         static_cast<double>(s.total_steps - s.warmup_steps);
}

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;  // decoupled; 0 gives plain Adam
};

template <class T>
struct OptimState {
  std::vector<Tensor<T>> m, v;
  std::size_t step = 0;
};

/// AdamW with bias-corrected moments and decoupled weight decay applied to
/// parameters flagged `decay`.
template <class T>
class AdamW {
 public:
  explicit AdamW(AdamWOptions options = {}) : options_(options) {}

  const AdamWOptions& options() const noexcept { return options_; }
  const OptimState<T>& state() const noexcept { return state_; }
  OptimState<T>& state() noexcept { return state_; }

  void step(std::vector<Parameter<T>>& params, double lr) {
    if (state_.m.empty()) {
      for (const auto& p : params) {
        state_.m.emplace_back(p.value.shape());
        state_.v.emplace_back(p.value.shape());
      }
    }
    if (state_.m.size() != params.size())
      throw std::invalid_argument("optimizer state holds " + std::to_string(state_.m.size()) +
                                  " moments for " + std::to_string(params.size()) + " parameters");
    ++state_.step;
    const double b1 = options_.beta1, b2 = options_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(state_.step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(state_.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Parameter<T>& p = params[i];
      Tensor<T>& m = state_.m[i];
      Tensor<T>& v = state_.v[i];
      if (m.shape() != p.value.shape()) throw shape_mismatch("adamw " + p.name, m.shape(), p.value.shape());
      if (p.grad.shape() != p.value.shape()) p.zero_grad();
      const double decay = p.decay ? lr * options_.weight_decay : 0.0;
      for (std::size_t j = 0; j < p.value.size(); ++j) {
        const double g = p.grad[j];
        const double mj = b1 * m[j] + (1.0 - b1) * g;
        const double vj = b2 * v[j] + (1.0 - b2) * g * g;
        m[j] = static_cast<T>(mj);
        v[j] = static_cast<T>(vj);
        const double mhat = mj / c1, vhat = vj / c2;
        const double pj = p.value[j];
        p.value[j] = static_cast<T>(pj - lr * mhat / (std::sqrt(vhat) + options_.eps) - decay * pj);
      }
    }
  }

 private:
  AdamWOptions options_;
  OptimState<T> state_;
};

template <class T>
void zero_grad(std::vector<Parameter<T>>& params) {
  for (auto& p : params) p.zero_grad();
}

template <class T>
double grad_norm(const std::vector<Parameter<T>>& params) {
  double sq = 0.0;
  for (const auto& p : params)
    for (T g : p.grad.data()) sq += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(sq);
}

/// Rescales all gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <class T>
double clip_grad_norm(std::vector<Parameter<T>>& params, double max_norm) {
  const double norm = grad_norm(params);
  if (max_norm > 0.0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& p : params)
      for (T& g : p.grad.data()) g *= s;
  }
  return norm;
}

}  // namespace tagbert
