#pragma once

// Scalar evaluation metrics: KL at a position, CE-score, weight and
// activation L1.

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "selfablate/checkpoint.hpp"
#include "selfablate/data.hpp"
#include "selfablate/model.hpp"
#include "selfablate/trainer.hpp"

namespace selfablate::analysis {

/// KL(softmax(p) || softmax(q)) in nats.
template <typename T>
double kl_divergence(std::span<const T> p_logits, std::span<const T> q_logits) {
  if (p_logits.size() != q_logits.size() || p_logits.empty()) {
    throw ShapeError("kl_divergence: logit vectors must be nonempty and equal length");
  }
  auto log_normalizer = [](std::span<const T> z) {
    const double m = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (T v : z) s += std::exp(static_cast<double>(v) - m);
    return m + std::log(s);
  };
  const double lp = log_normalizer(p_logits);
  const double lq = log_normalizer(q_logits);
  double kl = 0.0;
  for (std::size_t i = 0; i < p_logits.size(); ++i) {
    const double log_p = static_cast<double>(p_logits[i]) - lp;
    const double log_q = static_cast<double>(q_logits[i]) - lq;
    kl += std::exp(log_p) * (log_p - log_q);
  }
  return std::max(kl, 0.0);
}

inline double kl_divergence(const std::vector<double>& p, const std::vector<double>& q) {
  return kl_divergence<double>(std::span<const double>(p), std::span<const double>(q));
}

/// Fraction of the zero-ablation loss gap recovered by a replacement.
inline double ce_score(double h_clean, double h_replaced, double h_zero) {
  if (h_zero == h_clean) return 1.0;
  return std::clamp((h_zero - h_replaced) / (h_zero - h_clean), 0.0, 1.0);
}

struct CeScoreReport {
  double h_clean = 0.0;
  double h_replaced = 0.0;
  double h_zero = 0.0;
  double score = 0.0;
};

/// Mean token CE of the clean path with `replace` applied at (layer, site).
template <typename T>
double patched_mean_ce(const Transformer<T>& model, const std::vector<Batch>& batches, std::size_t layer, Site site,
                       const std::function<void(Tensor<T>&)>& replace) {
  const ActivationHook<T> hook = [&](const HookPoint& p, Tensor<T>& t) {
    if (p.layer == layer && p.site == site && p.stream == Stream::clean) replace(t);
  };
  double total = 0.0;
  std::size_t tokens = 0;
  NoGradGuard no_grad;
  for (const auto& b : batches) {
    const Tensor<T> logits = model.forward_inference(b.input, &hook);
    total += static_cast<double>(cross_entropy(logits, b.targets).item()) * static_cast<double>(b.targets.size());
    tokens += b.targets.size();
  }
  if (tokens == 0) throw Error("CE evaluation needs at least one batch");
  return total / static_cast<double>(tokens);
}

/// CE-score of a site replacement (e.g. an SAE reconstruction) against
/// zero-ablation of the same site.
template <typename T>
CeScoreReport evaluate_ce_score(const Transformer<T>& model, const std::vector<Batch>& batches, std::size_t layer,
                                Site site, const std::function<void(Tensor<T>&)>& replace) {
  CeScoreReport r;
  r.h_clean = mean_token_ce(model, batches);
  r.h_replaced = patched_mean_ce(model, batches, layer, site, replace);
  r.h_zero = patched_mean_ce<T>(model, batches, layer, site,
                                [](Tensor<T>& t) { t = Tensor<T>::zeros(t.shape()); });
  r.score = ce_score(r.h_clean, r.h_replaced, r.h_zero);
  return r;
}

/// Mean absolute value over all non-gate parameters.
inline double weight_l1(const Checkpoint& ckpt) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& [name, t] : ckpt.params) {
    if (is_gate_parameter(name)) continue;
    for (float v : t.data) sum += std::abs(static_cast<double>(v));
    n += t.data.size();
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

/// Mean absolute value of every attention and MLP block output on the clean
/// path over `batches`.
template <typename T>
double activation_l1(const Transformer<T>& model, const std::vector<Batch>& batches) {
  double sum = 0.0;
  std::size_t n = 0;
  const ActivationHook<T> hook = [&](const HookPoint& p, Tensor<T>& t) {
    if (p.site != Site::attn_out && p.site != Site::mlp_out) return;
    for (T v : t.data()) sum += std::abs(static_cast<double>(v));
    n += t.size();
  };
  for (const auto& b : batches) model.forward_inference(b.input, &hook);
  return n ? sum / static_cast<double>(n) : 0.0;
}

}  // namespace selfablate::analysis
