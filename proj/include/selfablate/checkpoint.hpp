#pragma once

// Model checkpoints on top of the SABT container, plus the gate-stripped
// "standard" export.

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "selfablate/config.hpp"
#include "selfablate/container.hpp"
#include "selfablate/model.hpp"
#include "selfablate/optim.hpp"

namespace selfablate {

struct Checkpoint {
  ModelConfig config;
  std::vector<std::pair<std::string, StoredTensor>> params;  // canonical order
  std::optional<AdamState<float>> optimizer;                 // aligned with params
  std::uint64_t step = 0;
  json train = nullptr;  // training config snapshot, if any

  const StoredTensor& param(const std::string& name) const {
    for (const auto& [n, t] : params) {
      if (n == name) return t;
    }
    throw FormatError("checkpoint has no parameter '" + name + "'");
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params) n += t.data.size();
    return n;
  }

  bool operator==(const Checkpoint& other) const {
    if (!(config == other.config) || step != other.step || train != other.train) return false;
    if (params.size() != other.params.size()) return false;
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].first != other.params[i].first || params[i].second.shape != other.params[i].second.shape ||
          params[i].second.data != other.params[i].second.data) {
        return false;
      }
    }
    if (optimizer.has_value() != other.optimizer.has_value()) return false;
    if (optimizer) {
      return optimizer->step == other.optimizer->step && optimizer->m == other.optimizer->m &&
             optimizer->v == other.optimizer->v;
    }
    return true;
  }
};

/// Checks names and shapes against the config.
inline void validate_checkpoint(const Checkpoint& ckpt) {
  ckpt.config.validate();
  const auto specs = parameter_specs(ckpt.config);
  if (specs.size() != ckpt.params.size()) {
    throw FormatError("checkpoint holds " + std::to_string(ckpt.params.size()) +
                      " parameters; config implies " + std::to_string(specs.size()));
  }
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& [name, t] = ckpt.params[i];
    if (name != specs[i].name || t.shape != specs[i].shape || numel(t.shape) != t.data.size()) {
      throw FormatError("checkpoint parameter '" + name + "' does not match config (expected '" +
                        specs[i].name + "' " + to_string(specs[i].shape) + ")");
    }
  }
  if (ckpt.optimizer) {
    if (ckpt.optimizer->m.size() != specs.size() || ckpt.optimizer->v.size() != specs.size()) {
      throw FormatError("optimizer state does not match parameter list");
    }
    for (std::size_t i = 0; i < specs.size(); ++i) {
      if (ckpt.optimizer->m[i].size() != ckpt.params[i].second.data.size() ||
          ckpt.optimizer->v[i].size() != ckpt.params[i].second.data.size()) {
        throw FormatError("optimizer moment shape mismatch for '" + ckpt.params[i].first + "'");
      }
    }
  }
}

template <typename T>
Checkpoint make_checkpoint(const Transformer<T>& model, std::uint64_t step = 0) {
  Checkpoint c;
  c.config = model.config();
  c.step = step;
  for (const auto& [name, t] : model.parameters()) {
    StoredTensor s{t.shape(), std::vector<float>(t.data().begin(), t.data().end())};
    c.params.emplace_back(name, std::move(s));
  }
  return c;
}

/// Builds a model from checkpoint weights (converted to T).
template <typename T>
Transformer<T> load_model(const Checkpoint& ckpt) {
  validate_checkpoint(ckpt);
  NamedTensors<T> tensors;
  for (const auto& [name, s] : ckpt.params) {
    tensors.emplace_back(name, Tensor<T>(s.shape, std::vector<T>(s.data.begin(), s.data.end()), true));
  }
  return Transformer<T>(ckpt.config, std::move(tensors));
}

inline Container to_container(const Checkpoint& ckpt) {
  Container c;
  c.metadata = {{"kind", "checkpoint"},
                {"config", to_json(ckpt.config)},
                {"step", ckpt.step},
                {"train", ckpt.train},
                {"optimizer", nullptr}};
  for (const auto& [name, t] : ckpt.params) c.tensors.emplace_back(name, t);
  if (ckpt.optimizer) {
    c.metadata["optimizer"] = {{"type", "adamw"}, {"step", ckpt.optimizer->step}};
    for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
      c.tensors.emplace_back("optim.m/" + ckpt.params[i].first,
                             StoredTensor{ckpt.params[i].second.shape, ckpt.optimizer->m[i]});
    }
    for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
      c.tensors.emplace_back("optim.v/" + ckpt.params[i].first,
                             StoredTensor{ckpt.params[i].second.shape, ckpt.optimizer->v[i]});
    }
  }
  return c;
}

inline Checkpoint from_container(const Container& c) {
  if (c.metadata.value("kind", "") != "checkpoint") throw FormatError("SABT file is not a model checkpoint");
  Checkpoint ckpt;
  try {
    ckpt.config = model_config_from_json(c.metadata.at("config"), "config");
    ckpt.step = c.metadata.at("step").get<std::uint64_t>();
    ckpt.train = c.metadata.value("train", json(nullptr));
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed checkpoint metadata: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("malformed checkpoint config: ") + e.what());
  }
  for (const auto& [name, t] : c.tensors) {
    if (name.rfind("optim.", 0) != 0) ckpt.params.emplace_back(name, t);
  }
  const json& opt = c.metadata.value("optimizer", json(nullptr));
  if (!opt.is_null()) {
    AdamState<float> state;
    state.step = opt.at("step").get<std::uint64_t>();
    for (const auto& [name, _] : ckpt.params) state.m.push_back(c.at("optim.m/" + name).data);
    for (const auto& [name, _] : ckpt.params) state.v.push_back(c.at("optim.v/" + name).data);
    ckpt.optimizer = std::move(state);
  }
  validate_checkpoint(ckpt);
  return ckpt;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  validate_checkpoint(ckpt);
  save_container(path, to_container(ckpt));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return from_container(load_container(path));
}

/// Drops every gate projection and forces ablation_mode=none. The result is
/// an ordinary transformer checkpoint with identical inference behaviour.
inline Checkpoint export_standard(const Checkpoint& ckpt) {
  validate_checkpoint(ckpt);
  Checkpoint out;
  out.config = ckpt.config;
  out.config.ablation_mode = AblationMode::none;
  out.step = ckpt.step;
  out.train = ckpt.train;
  for (const auto& [name, t] : ckpt.params) {
    if (!is_gate_parameter(name)) out.params.emplace_back(name, t);
  }
  validate_checkpoint(out);
  return out;
}

}  // namespace selfablate
