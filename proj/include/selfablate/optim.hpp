#pragma once

// AdamW with decoupled weight decay, global-norm gradient clipping and a
// cosine learning-rate schedule.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "selfablate/tensor.hpp"

namespace selfablate {

/// lr_min + (lr_peak - lr_min) * (1 + cos(pi * step / total)) / 2
inline double cosine_lr(std::size_t step, std::size_t total_steps, double lr_peak, double lr_min = 0.0) {
  if (total_steps == 0) return lr_peak;
  if (step > total_steps) throw RangeError("cosine_lr: step beyond total_steps");
  const double progress = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_min + 0.5 * (lr_peak - lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

/// Global L2 norm over all gradients.
template <typename T>
double grad_global_norm(const std::vector<Tensor<T>>& params) {
  double total = 0.0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (T g : p.grad()) total += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(total);
}

/// Scales gradients so their global norm is at most `max_norm`. Returns the
/// norm before clipping. Throws NonFiniteError on NaN/Inf gradients.
template <typename T>
double clip_grad_norm(std::vector<Tensor<T>>& params, double max_norm) {
  const double norm = grad_global_norm(params);
  if (!std::isfinite(norm)) throw NonFiniteError("non-finite gradient norm; step aborted");
  if (norm > max_norm) {
    const T factor = static_cast<T>(max_norm / norm);
    for (auto& p : params) {
      if (!p.has_grad()) continue;
      for (auto& g : p.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Per-parameter moments, aligned with the parameter list they were built for.
template <typename T>
struct AdamState {
  std::uint64_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;

  static AdamState for_params(const std::vector<Tensor<T>>& params) {
    AdamState s;
    for (const auto& p : params) {
      s.m.emplace_back(p.size(), T{0});
      s.v.emplace_back(p.size(), T{0});
    }
    return s;
  }
};

/// One bias-corrected AdamW update, in place. Parameters without a gradient
/// are treated as having a zero gradient.
template <typename T>
void adamw_step(std::vector<Tensor<T>>& params, AdamState<T>& state, double lr, const AdamWConfig& cfg) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeError("adamw_step: optimizer state does not match parameter list");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].size()) {
      throw ShapeError("adamw_step: moment shape mismatch at parameter " + std::to_string(i));
    }
    if (!params[i].has_grad()) continue;
    for (T g : params[i].grad()) {
      if (!std::isfinite(g)) throw NonFiniteError("non-finite gradient; step aborted");
    }
  }
  ++state.step;
  const T b1 = static_cast<T>(cfg.beta1);
  const T b2 = static_cast<T>(cfg.beta2);
  const T bc1 = static_cast<T>(1.0 - std::pow(cfg.beta1, static_cast<double>(state.step)));
  const T bc2 = static_cast<T>(1.0 - std::pow(cfg.beta2, static_cast<double>(state.step)));
  const T step_lr = static_cast<T>(lr);
  const T decay = static_cast<T>(1.0 - lr * cfg.weight_decay);
  const T eps = static_cast<T>(cfg.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const bool has = params[i].has_grad();
    auto g = has ? params[i].grad() : std::span<const T>{};
    for (std::size_t j = 0; j < w.size(); ++j) {
      const T gj = has ? g[j] : T{0};
      m[j] = b1 * m[j] + (T{1} - b1) * gj;
      v[j] = b2 * v[j] + (T{1} - b2) * gj * gj;
      const T mhat = m[j] / bc1;
      const T vhat = v[j] / bc2;
      if (cfg.weight_decay != 0.0) w[j] *= decay;
      w[j] -= step_lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

}  // namespace selfablate
