#pragma once

// GPT-Neo style decoder-only transformer with a dual (clean / ablated)
// residual stream and per-token kWTA gating of attention heads and MLP
// neurons.
//
// Block layout (pre-LN):
//   x += out_proj( heads(ln_1(x)) * head_gate )
//   x += proj( gelu(fc(ln_2(x))) * neuron_gate )
// Gate scores come from a learned affine map per block. In local mode the
// map reads the ablated stream's block input; in global mode every block's
// map reads the clean pass's final normalized hidden state.

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "selfablate/config.hpp"
#include "selfablate/kwta.hpp"
#include "selfablate/ops.hpp"
#include "selfablate/tensor.hpp"

namespace selfablate {

/// A [batch, seq] block of token ids.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::int32_t> ids;

  Shape shape() const { return {batch, seq}; }

  static TokenBatch single(std::vector<std::int32_t> ids) {
    TokenBatch b;
    b.batch = 1;
    b.seq = ids.size();
    b.ids = std::move(ids);
    return b;
  }
};

enum class Site { attn_out, mlp_hidden, mlp_out, resid, attn_gate, mlp_gate };

inline std::string to_string(Site s) {
  switch (s) {
    case Site::attn_out: return "attn_out";
    case Site::mlp_hidden: return "mlp_hidden";
    case Site::mlp_out: return "mlp_out";
    case Site::resid: return "resid";
    case Site::attn_gate: return "attn_gate";
    case Site::mlp_gate: return "mlp_gate";
  }
  return "resid";
}

inline Site parse_site(const std::string& s) {
  for (Site site : {Site::attn_out, Site::mlp_hidden, Site::mlp_out, Site::resid}) {
    if (to_string(site) == s) return site;
  }
  throw ConfigError("unknown activation site '" + s + "' (expected attn_out|mlp_hidden|mlp_out|resid)");
}

enum class Stream { clean, ablated };

struct HookPoint {
  std::size_t layer;
  Site site;
  Stream stream;
};

/// Called at every hook point with the live activation; the callee may
/// replace the tensor to patch the rest of the forward pass. mlp_hidden is
/// seen after gating; gate sites are observe-only.
template <typename T>
using ActivationHook = std::function<void(const HookPoint&, Tensor<T>&)>;

template <typename T>
struct DualOutput {
  Tensor<T> clean_logits;
  Tensor<T> ablated_logits;
  std::size_t stack_traversals = 0;
};

struct ParameterSpec {
  std::string name;
  Shape shape;
  bool gate = false;
  enum class Init { normal, zeros, ones } init = Init::normal;
};

/// Every parameter the config implies, in canonical order. Embeddings are
/// tied: the unembedding reuses `wte`.
inline std::vector<ParameterSpec> parameter_specs(const ModelConfig& c) {
  using I = ParameterSpec::Init;
  const std::size_t D = c.d_model;
  std::vector<ParameterSpec> specs;
  specs.push_back({"wte", {c.vocab_size, D}, false, I::normal});
  specs.push_back({"wpe", {c.max_pos, D}, false, I::normal});
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "h." + std::to_string(l) + ".";
    specs.push_back({p + "ln_1.weight", {D}, false, I::ones});
    specs.push_back({p + "ln_1.bias", {D}, false, I::zeros});
    specs.push_back({p + "attn.q.weight", {D, D}, false, I::normal});
    specs.push_back({p + "attn.k.weight", {D, D}, false, I::normal});
    specs.push_back({p + "attn.v.weight", {D, D}, false, I::normal});
    specs.push_back({p + "attn.out.weight", {D, D}, false, I::normal});
    specs.push_back({p + "attn.out.bias", {D}, false, I::zeros});
    specs.push_back({p + "ln_2.weight", {D}, false, I::ones});
    specs.push_back({p + "ln_2.bias", {D}, false, I::zeros});
    specs.push_back({p + "mlp.fc.weight", {D, c.d_mlp}, false, I::normal});
    specs.push_back({p + "mlp.fc.bias", {c.d_mlp}, false, I::zeros});
    specs.push_back({p + "mlp.proj.weight", {c.d_mlp, D}, false, I::normal});
    specs.push_back({p + "mlp.proj.bias", {D}, false, I::zeros});
  }
  specs.push_back({"ln_f.weight", {D}, false, I::ones});
  specs.push_back({"ln_f.bias", {D}, false, I::zeros});
  if (c.has_gates()) {
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      const std::string p = "h." + std::to_string(l) + ".gate.";
      specs.push_back({p + "attn.weight", {D, c.n_heads}, true, I::normal});
      specs.push_back({p + "attn.bias", {c.n_heads}, true, I::zeros});
      specs.push_back({p + "mlp.weight", {D, c.d_mlp}, true, I::normal});
      specs.push_back({p + "mlp.bias", {c.d_mlp}, true, I::zeros});
    }
  }
  return specs;
}

inline bool is_gate_parameter(const std::string& name) {
  return name.find(".gate.") != std::string::npos;
}

struct ParameterCount {
  std::size_t base = 0;
  std::size_t gate = 0;
  std::size_t total() const { return base + gate; }
};

/// Closed-form parameter count.
inline ParameterCount count_parameters(const ModelConfig& c) {
  const std::size_t D = c.d_model, F = c.d_mlp;
  const std::size_t per_block = 2 * D            // ln_1
                                + 4 * D * D + D  // q, k, v, out (+ out bias)
                                + 2 * D          // ln_2
                                + D * F + F      // fc
                                + F * D + D;     // proj
  ParameterCount n;
  n.base = c.vocab_size * D + c.max_pos * D + c.n_layers * per_block + 2 * D;
  n.gate = c.has_gates() ? c.n_layers * (D + 1) * (c.n_heads + F) : 0;
  return n;
}

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

template <typename T>
class Transformer {
 public:
  explicit Transformer(ModelConfig config) : config_(std::move(config)) {
    config_.validate();
    std::mt19937_64 rng(config_.seed);
    std::normal_distribution<double> normal(0.0, 0.02);
    for (const auto& spec : parameter_specs(config_)) {
      std::vector<T> data(numel(spec.shape));
      switch (spec.init) {
        case ParameterSpec::Init::normal:
          for (auto& v : data) v = static_cast<T>(normal(rng));
          break;
        case ParameterSpec::Init::zeros: break;
        case ParameterSpec::Init::ones: std::fill(data.begin(), data.end(), T{1}); break;
      }
      add_parameter(spec.name, Tensor<T>(spec.shape, std::move(data), true));
    }
  }

  /// Adopts existing tensors; names and shapes must match the config exactly.
  Transformer(ModelConfig config, NamedTensors<T> tensors) : config_(std::move(config)) {
    config_.validate();
    std::map<std::string, Tensor<T>> by_name;
    for (auto& [name, t] : tensors) by_name.emplace(name, t);
    const auto specs = parameter_specs(config_);
    if (by_name.size() != specs.size()) {
      throw ShapeError("expected " + std::to_string(specs.size()) + " parameter tensors, got " +
                       std::to_string(by_name.size()));
    }
    for (const auto& spec : specs) {
      auto it = by_name.find(spec.name);
      if (it == by_name.end()) throw ShapeError("missing parameter tensor '" + spec.name + "'");
      if (it->second.shape() != spec.shape) {
        throw ShapeError("parameter '" + spec.name + "' has shape " + to_string(it->second.shape()) +
                         ", config implies " + to_string(spec.shape));
      }
      it->second.set_requires_grad(true);
      add_parameter(spec.name, it->second);
    }
  }

  const ModelConfig& config() const { return config_; }
  const NamedTensors<T>& parameters() const { return params_; }

  const Tensor<T>& param(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("no parameter named '" + name + "'");
    return params_[it->second].second;
  }

  void zero_grad() {
    for (auto& [_, t] : params_) t.zero_grad();
  }

  /// Both streams in one call. In mode `none` the ablated logits alias the
  /// clean logits.
  DualOutput<T> forward_dual(const TokenBatch& tokens, const ActivationHook<T>* hook = nullptr) const {
    check_tokens(tokens);
    DualOutput<T> out;
    const Tensor<T> x0 = embed(tokens);

    if (!config_.has_gates()) {
      Tensor<T> x = x0;
      for (std::size_t l = 0; l < config_.n_layers; ++l) x = block(x, l, nullptr, nullptr, hook, Stream::clean);
      ++out.stack_traversals;
      out.clean_logits = unembed(final_norm(x));
      out.ablated_logits = out.clean_logits;
      return out;
    }

    Tensor<T> clean = x0;
    for (std::size_t l = 0; l < config_.n_layers; ++l) clean = block(clean, l, nullptr, nullptr, hook, Stream::clean);
    ++out.stack_traversals;
    const Tensor<T> clean_final = final_norm(clean);
    out.clean_logits = unembed(clean_final);

    Tensor<T> ablated = x0;
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
      const Tensor<T>& context = config_.ablation_mode == AblationMode::local ? ablated : clean_final;
      const std::string p = "h." + std::to_string(l) + ".gate.";
      Tensor<T> head_gate = kwta::ste_gate(linear(context, param(p + "attn.weight"), param(p + "attn.bias")), config_.k_attn);
      Tensor<T> neuron_gate = kwta::ste_gate(linear(context, param(p + "mlp.weight"), param(p + "mlp.bias")), config_.k_mlp);
      if (hook) {
        (*hook)({l, Site::attn_gate, Stream::ablated}, head_gate);
        (*hook)({l, Site::mlp_gate, Stream::ablated}, neuron_gate);
      }
      ablated = block(ablated, l, &head_gate, &neuron_gate, hook, Stream::ablated);
    }
    ++out.stack_traversals;
    out.ablated_logits = unembed(final_norm(ablated));
    return out;
  }

  /// Single clean pass; gate projections are never touched. Nothing is
  /// recorded on the tape.
  Tensor<T> forward_inference(const TokenBatch& tokens, const ActivationHook<T>* hook = nullptr) const {
    NoGradGuard no_grad;
    return forward_clean(tokens, hook);
  }

  /// Clean pass that records on the tape when grad mode is on.
  Tensor<T> forward_clean(const TokenBatch& tokens, const ActivationHook<T>* hook = nullptr) const {
    check_tokens(tokens);
    Tensor<T> x = embed(tokens);
    for (std::size_t l = 0; l < config_.n_layers; ++l) x = block(x, l, nullptr, nullptr, hook, Stream::clean);
    return unembed(final_norm(x));
  }

  /// Greedy continuation of `prompt`; the context is truncated to the last
  /// max_pos tokens.
  std::vector<std::int32_t> greedy_decode(std::vector<std::int32_t> prompt, std::size_t n_new) const {
    for (std::size_t i = 0; i < n_new; ++i) {
      const std::size_t start = prompt.size() > config_.max_pos ? prompt.size() - config_.max_pos : 0;
      auto window = TokenBatch::single({prompt.begin() + static_cast<std::ptrdiff_t>(start), prompt.end()});
      const Tensor<T> logits = forward_inference(window);
      const std::size_t V = config_.vocab_size;
      const T* last = logits.data().data() + (window.seq - 1) * V;
      std::size_t best = 0;
      for (std::size_t j = 1; j < V; ++j) {
        if (last[j] > last[best]) best = j;
      }
      prompt.push_back(static_cast<std::int32_t>(best));
    }
    return prompt;
  }

 private:
  void add_parameter(const std::string& name, Tensor<T> t) {
    index_[name] = params_.size();
    params_.emplace_back(name, std::move(t));
  }

  void check_tokens(const TokenBatch& tokens) const {
    if (tokens.batch == 0 || tokens.seq == 0 || tokens.ids.size() != tokens.batch * tokens.seq) {
      throw ShapeError("token batch is empty or inconsistent with its shape");
    }
    if (tokens.seq > config_.max_pos) {
      throw RangeError("sequence length " + std::to_string(tokens.seq) + " exceeds max_pos " +
                       std::to_string(config_.max_pos));
    }
    for (auto id : tokens.ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) {
        throw RangeError("token id " + std::to_string(id) + " outside vocabulary of " +
                         std::to_string(config_.vocab_size));
      }
    }
  }

  Tensor<T> embed(const TokenBatch& tokens) const {
    std::vector<std::int32_t> positions(tokens.ids.size());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<std::int32_t>(i % tokens.seq);
    return add(embedding<T>(tokens.ids, tokens.shape(), param("wte")),
               embedding<T>(positions, tokens.shape(), param("wpe")));
  }

  Tensor<T> final_norm(const Tensor<T>& x) const {
    return layer_norm(x, param("ln_f.weight"), param("ln_f.bias"));
  }

  Tensor<T> unembed(const Tensor<T>& h) const { return linear(h, transpose(param("wte"))); }

  Tensor<T> block(const Tensor<T>& x, std::size_t l, const Tensor<T>* head_gate,
                  const Tensor<T>* neuron_gate, const ActivationHook<T>* hook, Stream stream) const {
    const std::string p = "h." + std::to_string(l) + ".";
    auto fire = [&](Site site, Tensor<T>& t) {
      if (hook) (*hook)({l, site, stream}, t);
    };

    const Tensor<T> h = layer_norm(x, param(p + "ln_1.weight"), param(p + "ln_1.bias"));
    Tensor<T> heads = causal_attention(linear(h, param(p + "attn.q.weight")),
                                       linear(h, param(p + "attn.k.weight")),
                                       linear(h, param(p + "attn.v.weight")), config_.n_heads);
    if (head_gate) heads = mul(heads, repeat_last(*head_gate, config_.head_dim()));
    Tensor<T> attn_out = linear(heads, param(p + "attn.out.weight"), param(p + "attn.out.bias"));
    fire(Site::attn_out, attn_out);
    const Tensor<T> mid = add(x, attn_out);

    const Tensor<T> h2 = layer_norm(mid, param(p + "ln_2.weight"), param(p + "ln_2.bias"));
    Tensor<T> hidden = gelu(linear(h2, param(p + "mlp.fc.weight"), param(p + "mlp.fc.bias")));
    if (neuron_gate) hidden = mul(hidden, *neuron_gate);
    fire(Site::mlp_hidden, hidden);
    Tensor<T> mlp_out = linear(hidden, param(p + "mlp.proj.weight"), param(p + "mlp.proj.bias"));
    fire(Site::mlp_out, mlp_out);
    Tensor<T> out = add(mid, mlp_out);
    fire(Site::resid, out);
    return out;
  }

  ModelConfig config_;
  NamedTensors<T> params_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace selfablate
