#pragma once

// Sparse autoencoder over recorded activations.
//
//   x_hat  = x * norm_scale            (so that E||x_hat|| = sqrt(d))
//   f      = relu(x_hat W_enc + b_enc)
//   recon  = (f W_dec + b_dec) / norm_scale
//
// Loss per batch: sum_d (f W_dec + b_dec - x_hat)^2 averaged over tokens,
// plus lambda(t) * sum |f| averaged over tokens. Rows of W_dec (dictionary
// directions) are renormalized to unit length after each step.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "selfablate/analysis/record.hpp"
#include "selfablate/container.hpp"
#include "selfablate/ops.hpp"
#include "selfablate/optim.hpp"

namespace selfablate::analysis {

struct SaeConfig {
  std::size_t expansion = 16;
  double l1_coef = 1.0;  // 5 at full scale starves a 2,000-step run of reconstruction
  std::size_t l1_warmup_steps = 500;
  double lr = 4e-4;
  std::size_t lr_decay_steps = 400;  // linear decay to lr/10 over the final steps
  std::size_t total_steps = 2000;
  std::size_t batch_tokens = 4096;
  double beta1 = 0.9;
  double beta2 = 0.999;
  std::uint64_t seed = 42;

  void validate() const {
    if (expansion == 0 || total_steps == 0 || batch_tokens == 0) {
      throw ConfigError("SAE expansion, total_steps and batch_tokens must be positive");
    }
    if (!(lr > 0.0) || l1_coef < 0.0) throw ConfigError("SAE lr must be positive and l1_coef non-negative");
    if (lr_decay_steps > total_steps) throw ConfigError("SAE lr_decay_steps exceeds total_steps");
  }
};

/// Reference settings from a full-scale run (100k steps of 4096 tokens).
inline SaeConfig sae_full_scale_preset() {
  SaeConfig c;
  c.l1_coef = 5.0;
  c.lr = 1e-5;
  c.l1_warmup_steps = 5000;
  c.lr_decay_steps = 20000;
  c.total_steps = 100000;
  return c;
}

inline json to_json(const SaeConfig& c) {
  return json{{"expansion", c.expansion},     {"l1_coef", c.l1_coef}, {"l1_warmup_steps", c.l1_warmup_steps},
              {"lr", c.lr},                   {"lr_decay_steps", c.lr_decay_steps},
              {"total_steps", c.total_steps}, {"batch_tokens", c.batch_tokens},
              {"beta1", c.beta1},             {"beta2", c.beta2},     {"seed", c.seed}};
}

/// Linear ramp from 0 at step 0 to `coef` at `warmup`, constant after.
inline double l1_schedule(std::size_t step, std::size_t warmup, double coef) {
  if (warmup == 0 || step >= warmup) return coef;
  return coef * static_cast<double>(step) / static_cast<double>(warmup);
}

/// Constant lr, then a linear ramp down to lr/10 across the final
/// `decay_steps` steps.
inline double sae_lr(std::size_t step, std::size_t total, std::size_t decay_steps, double lr) {
  if (decay_steps == 0 || step + decay_steps < total) return lr;
  const double frac = static_cast<double>(step + decay_steps - total) / static_cast<double>(decay_steps);
  return lr * (1.0 - 0.9 * frac);
}

/// E||x||_2 over rows, scaled so the normalized mean norm is sqrt(d).
inline double activation_norm_scale(const ActivationRecord& rec) {
  if (rec.n_tokens == 0) return 1.0;
  double mean_norm = 0.0;
  for (std::size_t i = 0; i < rec.n_tokens; ++i) {
    double s = 0.0;
    const float* r = rec.row(i);
    for (std::size_t j = 0; j < rec.d_site; ++j) s += static_cast<double>(r[j]) * r[j];
    mean_norm += std::sqrt(s);
  }
  mean_norm /= static_cast<double>(rec.n_tokens);
  return mean_norm > 0.0 ? std::sqrt(static_cast<double>(rec.d_site)) / mean_norm : 1.0;
}

struct SaeModel {
  std::size_t d_in = 0;
  std::size_t d_dict = 0;
  double norm_scale = 1.0;
  Tensor<float> w_enc;  // [d_in, d_dict]
  Tensor<float> b_enc;  // [d_dict]
  Tensor<float> w_dec;  // [d_dict, d_in]
  Tensor<float> b_dec;  // [d_in]

  static SaeModel init(std::size_t d_in, std::size_t expansion, std::uint64_t seed) {
    SaeModel m;
    m.d_in = d_in;
    m.d_dict = d_in * expansion;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<float> dec(m.d_dict * d_in);
    for (auto& v : dec) v = static_cast<float>(normal(rng));
    m.w_dec = Tensor<float>({m.d_dict, d_in}, std::move(dec), true);
    m.normalize_decoder();
    m.w_enc = Tensor<float>(transpose(m.w_dec).shape(), transpose(m.w_dec).values(), true);
    m.b_enc = Tensor<float>::zeros({m.d_dict}, true);
    m.b_dec = Tensor<float>::zeros({d_in}, true);
    return m;
  }

  std::vector<Tensor<float>> parameters() const { return {w_enc, b_enc, w_dec, b_dec}; }

  void normalize_decoder() {
    auto& w = w_dec.values();
    for (std::size_t i = 0; i < d_dict; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < d_in; ++j) s += static_cast<double>(w[i * d_in + j]) * w[i * d_in + j];
      const double n = std::sqrt(s);
      if (n > 0.0) {
        for (std::size_t j = 0; j < d_in; ++j) w[i * d_in + j] = static_cast<float>(w[i * d_in + j] / n);
      }
    }
  }

  /// Latents for raw (unnormalized) rows x[n, d_in].
  Tensor<float> encode(const Tensor<float>& x) const {
    return relu(linear(scale(x, static_cast<float>(norm_scale)), w_enc, b_enc));
  }

  /// Reconstruction in the raw activation space.
  Tensor<float> decode(const Tensor<float>& latents) const {
    return scale(linear(latents, w_dec, b_dec), static_cast<float>(1.0 / norm_scale));
  }

  Tensor<float> reconstruct(const Tensor<float>& x) const { return decode(encode(x)); }
};

struct SaeStepLog {
  std::size_t step = 0;
  double lr = 0.0;
  double l1_coef = 0.0;
  double mse = 0.0;
  double l1 = 0.0;
  double loss = 0.0;
};

/// Trains on rows of `rec` drawn in per-epoch shuffled order.
inline SaeModel sae_train(const ActivationRecord& rec, const SaeConfig& cfg,
                          const std::function<void(const SaeStepLog&)>& on_step = {}) {
  cfg.validate();
  if (rec.n_tokens == 0) throw Error("cannot train an SAE on an empty activation record");
  SaeModel sae = SaeModel::init(rec.d_site, cfg.expansion, cfg.seed);
  sae.norm_scale = activation_norm_scale(rec);
  auto params = sae.parameters();
  AdamState<float> state = AdamState<float>::for_params(params);
  const AdamWConfig adam{cfg.beta1, cfg.beta2, 1e-8, 0.0};

  const std::size_t d = rec.d_site;
  const std::size_t batch = std::min(cfg.batch_tokens, rec.n_tokens);
  std::vector<std::size_t> order(rec.n_tokens);
  std::size_t cursor = order.size();
  std::mt19937_64 rng(cfg.seed);
  const float inv_batch = 1.0f / static_cast<float>(batch);

  for (std::size_t step = 0; step < cfg.total_steps; ++step) {
    std::vector<float> rows(batch * d);
    for (std::size_t b = 0; b < batch; ++b) {
      if (cursor == order.size()) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const float* src = rec.row(order[cursor++]);
      for (std::size_t j = 0; j < d; ++j) rows[b * d + j] = src[j] * static_cast<float>(sae.norm_scale);
    }
    Tape<float>::current().clear();
    for (auto& p : params) p.zero_grad();

    const Tensor<float> x({batch, d}, std::move(rows));
    const Tensor<float> f = relu(linear(x, sae.w_enc, sae.b_enc));
    const Tensor<float> diff = sub(linear(f, sae.w_dec, sae.b_dec), x);
    const Tensor<float> mse = scale(sum(mul(diff, diff)), inv_batch);
    const double lambda = l1_schedule(step, cfg.l1_warmup_steps, cfg.l1_coef);
    const Tensor<float> l1 = scale(sum(f), inv_batch);  // f >= 0
    const Tensor<float> loss = add(mse, scale(l1, static_cast<float>(lambda)));
    if (!std::isfinite(loss.item())) throw NonFiniteError("non-finite SAE loss at step " + std::to_string(step));
    backward(loss);

    const double lr = sae_lr(step, cfg.total_steps, cfg.lr_decay_steps, cfg.lr);
    adamw_step(params, state, lr, adam);
    sae.normalize_decoder();
    if (on_step) on_step({step, lr, lambda, mse.item(), l1.item(), loss.item()});
  }
  return sae;
}

/// Mean number of strictly positive latents per row.
inline double sae_l0(const Tensor<float>& latents) {
  const std::size_t width = latents.shape().back();
  const std::size_t rows = latents.size() / width;
  if (rows == 0) return 0.0;
  std::size_t active = 0;
  for (float v : latents.data()) active += v > 0.0f ? 1 : 0;
  return static_cast<double>(active) / static_cast<double>(rows);
}

inline double sae_l0(const SaeModel& sae, const ActivationRecord& rec) {
  if (rec.d_site != sae.d_in) throw ShapeError("SAE input width does not match the record");
  NoGradGuard no_grad;
  constexpr std::size_t kChunk = 8192;
  double active = 0.0;
  for (std::size_t start = 0; start < rec.n_tokens; start += kChunk) {
    const std::size_t n = std::min(kChunk, rec.n_tokens - start);
    const Tensor<float> x({n, rec.d_site}, std::vector<float>(rec.row(start), rec.row(start) + n * rec.d_site));
    active += sae_l0(sae.encode(x)) * static_cast<double>(n);
  }
  return rec.n_tokens ? active / static_cast<double>(rec.n_tokens) : 0.0;
}

/// Mean squared reconstruction error per token, summed over dims, in the
/// raw activation space.
inline double sae_mse(const SaeModel& sae, const ActivationRecord& rec) {
  NoGradGuard no_grad;
  constexpr std::size_t kChunk = 8192;
  double total = 0.0;
  for (std::size_t start = 0; start < rec.n_tokens; start += kChunk) {
    const std::size_t n = std::min(kChunk, rec.n_tokens - start);
    const Tensor<float> x({n, rec.d_site}, std::vector<float>(rec.row(start), rec.row(start) + n * rec.d_site));
    const auto r = sae.reconstruct(x);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double e = static_cast<double>(r.data()[i]) - x.data()[i];
      total += e * e;
    }
  }
  return rec.n_tokens ? total / static_cast<double>(rec.n_tokens) : 0.0;
}

inline Container to_container(const SaeModel& sae, const SaeConfig& cfg, const ActivationRecord& rec) {
  Container c;
  c.metadata = {{"kind", "sae"},
                {"d_in", sae.d_in},
                {"d_dict", sae.d_dict},
                {"norm_scale", sae.norm_scale},
                {"site", to_string(rec.site)},
                {"layer", rec.layer},
                {"checkpoint_hash", rec.checkpoint_hash},
                {"record_hash", rec.content_hash()},
                {"config", to_json(cfg)}};
  c.tensors.emplace_back("w_enc", StoredTensor{sae.w_enc.shape(), sae.w_enc.values()});
  c.tensors.emplace_back("b_enc", StoredTensor{sae.b_enc.shape(), sae.b_enc.values()});
  c.tensors.emplace_back("w_dec", StoredTensor{sae.w_dec.shape(), sae.w_dec.values()});
  c.tensors.emplace_back("b_dec", StoredTensor{sae.b_dec.shape(), sae.b_dec.values()});
  return c;
}

struct LoadedSae {
  SaeModel sae;
  Site site = Site::mlp_out;
  std::size_t layer = 0;
};

inline LoadedSae sae_from_container(const Container& c) {
  if (c.metadata.value("kind", "") != "sae") throw FormatError("SABT file is not an SAE");
  LoadedSae out;
  try {
    out.sae.d_in = c.metadata.at("d_in").get<std::size_t>();
    out.sae.d_dict = c.metadata.at("d_dict").get<std::size_t>();
    out.sae.norm_scale = c.metadata.at("norm_scale").get<double>();
    out.site = parse_site(c.metadata.at("site").get<std::string>());
    out.layer = c.metadata.at("layer").get<std::size_t>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed SAE metadata: ") + e.what());
  }
  auto take = [&](const char* name, const Shape& expect) {
    const StoredTensor& t = c.at(name);
    if (t.shape != expect) throw FormatError(std::string("SAE tensor '") + name + "' has wrong shape");
    return Tensor<float>(t.shape, t.data, true);
  };
  out.sae.w_enc = take("w_enc", {out.sae.d_in, out.sae.d_dict});
  out.sae.b_enc = take("b_enc", {out.sae.d_dict});
  out.sae.w_dec = take("w_dec", {out.sae.d_dict, out.sae.d_in});
  out.sae.b_dec = take("b_dec", {out.sae.d_in});
  return out;
}

}  // namespace selfablate::analysis
