#pragma once

// Model and training configuration plus strict JSON (de)serialization.
// Unknown keys are rejected and every error names the offending key path.

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include "json.hpp"
#include "selfablate/tensor.hpp"

namespace selfablate {

using json = nlohmann::json;

class ConfigError : public Error {
 public:
  using Error::Error;
};

enum class AblationMode { none, local, global };

inline std::string to_string(AblationMode m) {
  switch (m) {
    case AblationMode::none: return "none";
    case AblationMode::local: return "local";
    case AblationMode::global: return "global";
  }
  return "none";
}

inline AblationMode parse_ablation_mode(const std::string& s) {
  if (s == "none") return AblationMode::none;
  if (s == "local") return AblationMode::local;
  if (s == "global") return AblationMode::global;
  throw ConfigError("unknown ablation_mode '" + s + "' (expected none|local|global)");
}

struct ModelConfig {
  std::size_t vocab_size = 257;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_mlp = 256;
  std::size_t max_pos = 256;
  AblationMode ablation_mode = AblationMode::none;
  std::size_t k_attn = 2;
  std::size_t k_mlp = 2;
  std::uint64_t seed = 0;

  std::size_t head_dim() const { return d_model / n_heads; }
  bool has_gates() const { return ablation_mode != AblationMode::none; }

  void validate() const {
    auto positive = [](std::size_t v, const char* key) {
      if (v == 0) throw ConfigError(std::string("model.") + key + " must be positive");
    };
    positive(vocab_size, "vocab_size");
    positive(d_model, "d_model");
    positive(n_layers, "n_layers");
    positive(n_heads, "n_heads");
    positive(d_mlp, "d_mlp");
    positive(max_pos, "max_pos");
    positive(k_attn, "k_attn");
    positive(k_mlp, "k_mlp");
    if (d_model % n_heads != 0) {
      throw ConfigError("model.n_heads must divide model.d_model");
    }
  }

  bool operator==(const ModelConfig&) const = default;
};

/// Full-scale architecture (TinyStories-3M style GPT-Neo), kept for reference.
inline ModelConfig full_scale_model_preset() {
  ModelConfig c;
  c.d_model = 128;
  c.n_layers = 8;
  c.n_heads = 16;
  c.d_mlp = 512;
  c.max_pos = 256;
  return c;
}

struct TrainConfig {
  double lr = 1.4e-3;
  double lr_min = 0.0;
  std::size_t total_steps = 2000;
  std::size_t batch_size = 16;
  std::size_t seq_len = 128;
  double weight_decay = 0.0;
  double grad_clip = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  std::size_t eval_interval = 100;
  std::size_t eval_batches = 8;
  std::size_t checkpoint_interval = 0;  // 0: only the final checkpoint
  double ablated_loss_weight = 1.0;

  void validate(const ModelConfig& model) const {
    auto positive = [](double v, const char* key) {
      if (!(v > 0)) throw ConfigError(std::string("train.") + key + " must be positive");
    };
    positive(lr, "lr");
    positive(static_cast<double>(total_steps), "total_steps");
    positive(static_cast<double>(batch_size), "batch_size");
    positive(static_cast<double>(seq_len), "seq_len");
    positive(grad_clip, "grad_clip");
    positive(beta1, "beta1");
    positive(beta2, "beta2");
    positive(adam_eps, "adam_eps");
    positive(static_cast<double>(eval_interval), "eval_interval");
    if (weight_decay < 0) throw ConfigError("train.weight_decay must be non-negative");
    if (lr_min < 0 || lr_min > lr) throw ConfigError("train.lr_min must lie in [0, lr]");
    if (beta1 >= 1 || beta2 >= 1) throw ConfigError("train.beta1/beta2 must be < 1");
    if (seq_len > model.max_pos) throw ConfigError("train.seq_len must not exceed model.max_pos");
  }

  bool operator==(const TrainConfig&) const = default;
};

/// Full-scale optimizer settings (400k iterations, batch 24).
inline TrainConfig full_scale_train_preset() {
  TrainConfig t;
  t.lr = 0.0014;
  t.weight_decay = 0.0;
  t.grad_clip = 1.0;
  t.batch_size = 24;
  t.total_steps = 400000;
  t.seq_len = 256;
  return t;
}

struct PathsConfig {
  std::string train_data;
  std::string val_data;  // optional; empty means hold out a tail split

  bool operator==(const PathsConfig&) const = default;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  PathsConfig paths;
};

namespace config_detail {

inline void reject_unknown(const json& obj, const std::string& prefix,
                           const std::set<std::string>& allowed) {
  if (!obj.is_object()) throw ConfigError(prefix + " must be a JSON object");
  for (const auto& [key, _] : obj.items()) {
    if (!allowed.count(key)) throw ConfigError("unknown config key '" + prefix + "." + key + "'");
  }
}

template <typename V>
void read(const json& obj, const std::string& prefix, const char* key, V& out, bool required) {
  auto it = obj.find(key);
  if (it == obj.end()) {
    if (required) throw ConfigError("missing required config key '" + prefix + "." + key + "'");
    return;
  }
  try {
    if constexpr (std::is_same_v<V, std::size_t> || std::is_same_v<V, std::uint64_t>) {
      if (!it->is_number_integer() || it->template get<std::int64_t>() < 0) {
        throw ConfigError("config key '" + prefix + "." + key + "' must be a non-negative integer");
      }
    } else if constexpr (std::is_same_v<V, double>) {
      if (!it->is_number()) throw ConfigError("config key '" + prefix + "." + key + "' must be a number");
    } else if constexpr (std::is_same_v<V, std::string>) {
      if (!it->is_string()) throw ConfigError("config key '" + prefix + "." + key + "' must be a string");
    }
    out = it->template get<V>();
  } catch (const json::exception& e) {
    throw ConfigError("config key '" + prefix + "." + key + "': " + e.what());
  }
}

}  // namespace config_detail

inline json to_json(const ModelConfig& c) {
  return json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},   {"n_layers", c.n_layers},
              {"n_heads", c.n_heads},       {"d_mlp", c.d_mlp},       {"max_pos", c.max_pos},
              {"ablation_mode", to_string(c.ablation_mode)},
              {"k_attn", c.k_attn},         {"k_mlp", c.k_mlp},       {"seed", c.seed}};
}

/// d_model, n_layers, n_heads and max_pos are required; d_mlp defaults to
/// 4 * d_model.
inline ModelConfig model_config_from_json(const json& j, const std::string& prefix = "model") {
  using namespace config_detail;
  reject_unknown(j, prefix, {"vocab_size", "d_model", "n_layers", "n_heads", "d_mlp", "max_pos",
                             "ablation_mode", "k_attn", "k_mlp", "seed"});
  ModelConfig c;
  read(j, prefix, "d_model", c.d_model, true);
  read(j, prefix, "n_layers", c.n_layers, true);
  read(j, prefix, "n_heads", c.n_heads, true);
  read(j, prefix, "max_pos", c.max_pos, true);
  c.d_mlp = 4 * c.d_model;
  read(j, prefix, "vocab_size", c.vocab_size, false);
  read(j, prefix, "d_mlp", c.d_mlp, false);
  std::string mode = "none";
  read(j, prefix, "ablation_mode", mode, false);
  c.ablation_mode = parse_ablation_mode(mode);
  read(j, prefix, "k_attn", c.k_attn, false);
  read(j, prefix, "k_mlp", c.k_mlp, false);
  read(j, prefix, "seed", c.seed, false);
  c.validate();
  return c;
}

inline json to_json(const TrainConfig& t) {
  return json{{"lr", t.lr},
              {"lr_min", t.lr_min},
              {"total_steps", t.total_steps},
              {"batch_size", t.batch_size},
              {"seq_len", t.seq_len},
              {"weight_decay", t.weight_decay},
              {"grad_clip", t.grad_clip},
              {"beta1", t.beta1},
              {"beta2", t.beta2},
              {"adam_eps", t.adam_eps},
              {"seed", t.seed},
              {"eval_interval", t.eval_interval},
              {"eval_batches", t.eval_batches},
              {"checkpoint_interval", t.checkpoint_interval},
              {"ablated_loss_weight", t.ablated_loss_weight}};
}

inline TrainConfig train_config_from_json(const json& j, const ModelConfig& model,
                                          const std::string& prefix = "train") {
  using namespace config_detail;
  reject_unknown(j, prefix, {"lr", "lr_min", "total_steps", "batch_size", "seq_len", "weight_decay",
                             "grad_clip", "beta1", "beta2", "adam_eps", "seed", "eval_interval",
                             "eval_batches", "checkpoint_interval", "ablated_loss_weight"});
  TrainConfig t;
  read(j, prefix, "lr", t.lr, false);
  read(j, prefix, "lr_min", t.lr_min, false);
  read(j, prefix, "total_steps", t.total_steps, false);
  read(j, prefix, "batch_size", t.batch_size, false);
  read(j, prefix, "seq_len", t.seq_len, false);
  read(j, prefix, "weight_decay", t.weight_decay, false);
  read(j, prefix, "grad_clip", t.grad_clip, false);
  read(j, prefix, "beta1", t.beta1, false);
  read(j, prefix, "beta2", t.beta2, false);
  read(j, prefix, "adam_eps", t.adam_eps, false);
  read(j, prefix, "seed", t.seed, false);
  read(j, prefix, "eval_interval", t.eval_interval, false);
  read(j, prefix, "eval_batches", t.eval_batches, false);
  read(j, prefix, "checkpoint_interval", t.checkpoint_interval, false);
  read(j, prefix, "ablated_loss_weight", t.ablated_loss_weight, false);
  t.validate(model);
  return t;
}

inline json to_json(const PathsConfig& p) {
  return json{{"train_data", p.train_data}, {"val_data", p.val_data}};
}

inline RunConfig run_config_from_json(const json& j) {
  using namespace config_detail;
  if (!j.is_object()) throw ConfigError("config root must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (key != "model" && key != "train" && key != "paths") {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  for (const char* section : {"model", "train", "paths"}) {
    if (!j.contains(section)) throw ConfigError(std::string("missing required config key '") + section + "'");
  }
  RunConfig rc;
  rc.model = model_config_from_json(j.at("model"));
  rc.train = train_config_from_json(j.at("train"), rc.model);
  const json& p = j.at("paths");
  reject_unknown(p, "paths", {"train_data", "val_data"});
  read(p, "paths", "train_data", rc.paths.train_data, true);
  read(p, "paths", "val_data", rc.paths.val_data, false);
  return rc;
}

inline json to_json(const RunConfig& rc) {
  return json{{"model", to_json(rc.model)}, {"train", to_json(rc.train)}, {"paths", to_json(rc.paths)}};
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace selfablate
