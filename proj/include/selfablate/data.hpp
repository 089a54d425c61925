#pragma once

// Byte-level tokenizer, corpus loading and deterministic batch streams.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "selfablate/model.hpp"
#include "selfablate/tensor.hpp"

namespace selfablate {

/// Bytes map to ids 0..255; id 256 is the end-of-document token.
struct ByteTokenizer {
  static constexpr std::int32_t kEos = 256;
  static constexpr std::size_t kVocabSize = 257;

  static std::vector<std::int32_t> encode(const std::string& text) {
    std::vector<std::int32_t> ids(text.size());
    for (std::size_t i = 0; i < text.size(); ++i) ids[i] = static_cast<unsigned char>(text[i]);
    return ids;
  }

  /// EOS ids are dropped.
  static std::string decode(const std::vector<std::int32_t>& ids) {
    std::string out;
    out.reserve(ids.size());
    for (auto id : ids) {
      if (id < 0 || id > kEos) throw RangeError("token id " + std::to_string(id) + " outside byte vocabulary");
      if (id != kEos) out.push_back(static_cast<char>(id));
    }
    return out;
  }
};

enum class CorpusFormat { automatic, plain, jsonl };

/// Plain text: documents are separated by blank lines. JSONL: one object per
/// line with a "text" field. Empty documents are dropped. `automatic` picks
/// JSONL for *.jsonl paths.
inline std::vector<std::string> load_corpus(const std::string& path, CorpusFormat format = CorpusFormat::automatic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read corpus '" + path + "'");
  if (format == CorpusFormat::automatic) {
    const bool jsonl = path.size() >= 6 && path.compare(path.size() - 6, 6, ".jsonl") == 0;
    format = jsonl ? CorpusFormat::jsonl : CorpusFormat::plain;
  }
  std::vector<std::string> docs;
  std::string line;
  if (format == CorpusFormat::jsonl) {
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.find_first_not_of(" \t") == std::string::npos) continue;
      try {
        const auto obj = nlohmann::json::parse(line);
        const std::string text = obj.at("text").get<std::string>();
        if (!text.empty()) docs.push_back(text);
      } catch (const nlohmann::json::exception& e) {
        throw Error("malformed JSONL at " + path + ":" + std::to_string(line_no) + ": " + e.what());
      }
    }
    return docs;
  }
  std::string current;
  bool have = false;
  auto flush = [&] {
    if (have && !current.empty()) docs.push_back(current);
    current.clear();
    have = false;
  };
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) {
      flush();
      continue;
    }
    if (have) current.push_back('\n');
    current += line;
    have = true;
  }
  flush();
  return docs;
}

/// Splits documents into a training prefix and a held-out tail.
inline std::pair<std::vector<std::string>, std::vector<std::string>> split_holdout(
    const std::vector<std::string>& docs, double holdout_fraction) {
  std::size_t n_hold = static_cast<std::size_t>(static_cast<double>(docs.size()) * holdout_fraction);
  if (docs.size() >= 2) n_hold = std::clamp<std::size_t>(n_hold, 1, docs.size() - 1);
  else n_hold = 0;
  std::vector<std::string> train(docs.begin(), docs.end() - static_cast<std::ptrdiff_t>(n_hold));
  std::vector<std::string> hold(docs.end() - static_cast<std::ptrdiff_t>(n_hold), docs.end());
  return {std::move(train), std::move(hold)};
}

struct Batch {
  TokenBatch input;
  std::vector<std::int32_t> targets;  // input shifted by one, same layout
};

/// Documents are tokenized and joined with EOS after each, then cut into
/// non-overlapping windows of seq_len + 1 tokens. Batches draw windows in a
/// per-epoch shuffled order derived from the seed, so `batch(step)` is a pure
/// function of (corpus, seed, step).
class BatchStream {
 public:
  BatchStream(const std::vector<std::string>& docs, std::size_t seq_len, std::size_t batch_size,
              std::uint64_t seed)
      : seq_len_(seq_len), batch_size_(batch_size), seed_(seed) {
    if (seq_len == 0 || batch_size == 0) throw ConfigError("seq_len and batch_size must be positive");
    std::vector<std::int32_t> stream;
    for (const auto& d : docs) {
      auto ids = ByteTokenizer::encode(d);
      stream.insert(stream.end(), ids.begin(), ids.end());
      stream.push_back(ByteTokenizer::kEos);
    }
    const std::size_t w = seq_len + 1;
    const std::size_t n = stream.size() / w;
    if (n == 0) {
      throw Error("corpus of " + std::to_string(stream.size()) + " tokens is shorter than one window of " +
                  std::to_string(w));
    }
    windows_.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      windows_.emplace_back(stream.begin() + static_cast<std::ptrdiff_t>(i * w),
                            stream.begin() + static_cast<std::ptrdiff_t>((i + 1) * w));
    }
  }

  std::size_t window_count() const { return windows_.size(); }
  const std::vector<std::int32_t>& window(std::size_t i) const { return windows_.at(i); }
  std::size_t seq_len() const { return seq_len_; }
  std::size_t batch_size() const { return batch_size_; }

  Batch batch(std::size_t step) const {
    Batch b;
    b.input.batch = batch_size_;
    b.input.seq = seq_len_;
    b.input.ids.reserve(batch_size_ * seq_len_);
    b.targets.reserve(batch_size_ * seq_len_);
    for (std::size_t j = 0; j < batch_size_; ++j) {
      const std::size_t g = step * batch_size_ + j;
      const auto& w = windows_[order(g / windows_.size())[g % windows_.size()]];
      b.input.ids.insert(b.input.ids.end(), w.begin(), w.end() - 1);
      b.targets.insert(b.targets.end(), w.begin() + 1, w.end());
    }
    return b;
  }

  /// Windows in order, grouped into batches (last partial batch dropped
  /// unless it would leave none). Used for evaluation.
  std::vector<Batch> sequential_batches(std::size_t max_batches) const {
    std::vector<Batch> out;
    const std::size_t per = std::min(batch_size_, windows_.size());
    for (std::size_t start = 0; start + per <= windows_.size() && out.size() < max_batches; start += per) {
      Batch b;
      b.input.batch = per;
      b.input.seq = seq_len_;
      for (std::size_t j = start; j < start + per; ++j) {
        const auto& w = windows_[j];
        b.input.ids.insert(b.input.ids.end(), w.begin(), w.end() - 1);
        b.targets.insert(b.targets.end(), w.begin() + 1, w.end());
      }
      out.push_back(std::move(b));
    }
    return out;
  }

 private:
  const std::vector<std::size_t>& order(std::size_t epoch) const {
    auto it = orders_.find(epoch);
    if (it != orders_.end()) return it->second;
    std::vector<std::size_t> perm(windows_.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    std::mt19937_64 rng(seed_ * 0x9E3779B97F4A7C15ULL + epoch);
    std::shuffle(perm.begin(), perm.end(), rng);
    if (orders_.size() > 4) orders_.clear();
    return orders_.emplace(epoch, std::move(perm)).first->second;
  }

  std::size_t seq_len_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::vector<std::vector<std::int32_t>> windows_;
  mutable std::map<std::size_t, std::vector<std::size_t>> orders_;
};

}  // namespace selfablate
