#pragma once

// Activation recording at a single hook site of the clean (inference) path.

#include <cstdint>
#include <string>
#include <vector>

#include "selfablate/checkpoint.hpp"
#include "selfablate/container.hpp"
#include "selfablate/data.hpp"
#include "selfablate/model.hpp"

namespace selfablate::analysis {

struct ActivationRecord {
  Site site = Site::mlp_out;
  std::size_t layer = 0;
  std::size_t n_tokens = 0;
  std::size_t d_site = 0;
  std::string checkpoint_hash;
  std::string data_hash;
  std::vector<float> data;  // row-major [n_tokens, d_site]

  const float* row(std::size_t i) const { return data.data() + i * d_site; }
  std::string content_hash() const {
    return hex64(fnv1a(std::string_view(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(float))));
  }
};

inline std::size_t site_width(const ModelConfig& c, Site site) {
  switch (site) {
    case Site::mlp_hidden: return c.d_mlp;
    case Site::attn_out:
    case Site::mlp_out:
    case Site::resid: return c.d_model;
    default: throw ConfigError("site '" + to_string(site) + "' cannot be recorded");
  }
}

/// The block before the last one (block 0 for single-block models).
inline std::size_t penultimate_layer(const ModelConfig& c) { return c.n_layers >= 2 ? c.n_layers - 2 : 0; }

inline std::string checkpoint_hash(const Checkpoint& ckpt) {
  return hex64(fnv1a(encode_container(to_container(ckpt))));
}

inline std::string documents_hash(const std::vector<std::string>& docs) {
  std::uint64_t h = fnv1a(std::string_view{});
  for (const auto& d : docs) {
    h = fnv1a(d, h);
    h = fnv1a(std::string_view("\x1e", 1), h);
  }
  return hex64(h);
}

/// Token sequences fed to the model when recording: each document is
/// tokenized on its own and cut into chunks of at most max_pos tokens.
inline std::vector<std::vector<std::int32_t>> document_chunks(const std::vector<std::string>& docs,
                                                              std::size_t max_pos, std::size_t max_tokens = 0) {
  std::vector<std::vector<std::int32_t>> chunks;
  std::size_t total = 0;
  for (const auto& doc : docs) {
    const auto ids = ByteTokenizer::encode(doc);
    for (std::size_t start = 0; start < ids.size(); start += max_pos) {
      std::size_t end = std::min(ids.size(), start + max_pos);
      if (max_tokens) end = std::min(end, start + (max_tokens - total));
      chunks.emplace_back(ids.begin() + static_cast<std::ptrdiff_t>(start), ids.begin() + static_cast<std::ptrdiff_t>(end));
      total += end - start;
      if (max_tokens && total >= max_tokens) return chunks;
    }
  }
  return chunks;
}

/// Inference forward over `docs`; one row per token in document order.
/// `max_tokens` = 0 records everything.
inline ActivationRecord record_activations(const Checkpoint& ckpt, const std::vector<std::string>& docs, Site site,
                                           std::size_t layer, std::size_t max_tokens = 0) {
  const ModelConfig& cfg = ckpt.config;
  if (layer >= cfg.n_layers) {
    throw ConfigError("layer " + std::to_string(layer) + " out of range for a " + std::to_string(cfg.n_layers) +
                      "-layer model");
  }
  ActivationRecord rec;
  rec.site = site;
  rec.layer = layer;
  rec.d_site = site_width(cfg, site);
  rec.checkpoint_hash = checkpoint_hash(ckpt);
  rec.data_hash = documents_hash(docs);

  const Transformer<float> model = load_model<float>(ckpt);
  const auto chunks = document_chunks(docs, cfg.max_pos, max_tokens);
  std::vector<float> captured;
  const ActivationHook<float> hook = [&](const HookPoint& p, Tensor<float>& t) {
    if (p.layer == layer && p.site == site && p.stream == Stream::clean) captured = t.values();
  };

  // Consecutive chunks of equal length share a batch.
  constexpr std::size_t kMaxBatch = 16;
  for (std::size_t i = 0; i < chunks.size();) {
    std::size_t j = i + 1;
    while (j < chunks.size() && j - i < kMaxBatch && chunks[j].size() == chunks[i].size()) ++j;
    TokenBatch batch;
    batch.batch = j - i;
    batch.seq = chunks[i].size();
    for (std::size_t c = i; c < j; ++c) batch.ids.insert(batch.ids.end(), chunks[c].begin(), chunks[c].end());
    model.forward_inference(batch, &hook);
    rec.data.insert(rec.data.end(), captured.begin(), captured.end());
    i = j;
  }
  rec.n_tokens = rec.data.size() / rec.d_site;
  return rec;
}

inline Container to_container(const ActivationRecord& rec) {
  Container c;
  c.metadata = {{"kind", "activation_record"}, {"site", to_string(rec.site)},
                {"layer", rec.layer},           {"n_tokens", rec.n_tokens},
                {"d_site", rec.d_site},         {"checkpoint_hash", rec.checkpoint_hash},
                {"data_hash", rec.data_hash}};
  c.tensors.emplace_back("activations", StoredTensor{{rec.n_tokens, rec.d_site}, rec.data});
  return c;
}

inline ActivationRecord record_from_container(const Container& c) {
  if (c.metadata.value("kind", "") != "activation_record") throw FormatError("SABT file is not an activation record");
  ActivationRecord rec;
  try {
    rec.site = parse_site(c.metadata.at("site").get<std::string>());
    rec.layer = c.metadata.at("layer").get<std::size_t>();
    rec.n_tokens = c.metadata.at("n_tokens").get<std::size_t>();
    rec.d_site = c.metadata.at("d_site").get<std::size_t>();
    rec.checkpoint_hash = c.metadata.at("checkpoint_hash").get<std::string>();
    rec.data_hash = c.metadata.at("data_hash").get<std::string>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed activation record metadata: ") + e.what());
  }
  const StoredTensor& t = c.at("activations");
  if (t.shape != Shape{rec.n_tokens, rec.d_site}) throw FormatError("activation tensor shape disagrees with metadata");
  rec.data = t.data;
  return rec;
}

inline void save_record(const std::string& path, const ActivationRecord& rec) { save_container(path, to_container(rec)); }
inline ActivationRecord load_record(const std::string& path) { return record_from_container(load_container(path)); }

}  // namespace selfablate::analysis
