#pragma once

// "SABT" tensor container shared by checkpoints, activation records and SAEs.
//
//   bytes 0..3    magic "SABT"
//   bytes 4..7    u32 LE version (1)
//   bytes 8..15   u64 LE metadata length L
//   bytes 16..    L bytes of UTF-8 JSON metadata
//   padding       zeros up to the next multiple of 64
//   payload       raw LE f32 tensors, each starting on a 64-byte boundary
//
// metadata["tensors"] maps name -> {"dtype":"f32","shape":[...],"offset":N}
// with offsets relative to the payload start. Tensors are stored in the
// order given at write time; readers restore that order from the offsets.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "selfablate/tensor.hpp"

namespace selfablate {

static_assert(std::endian::native == std::endian::little, "SABT I/O assumes a little-endian host");

class FormatError : public Error {
 public:
  using Error::Error;
};

inline constexpr char kContainerMagic[4] = {'S', 'A', 'B', 'T'};
inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr std::size_t kContainerAlign = 64;

struct StoredTensor {
  Shape shape;
  std::vector<float> data;
};

struct Container {
  nlohmann::json metadata = nlohmann::json::object();  // without the "tensors" index
  std::vector<std::pair<std::string, StoredTensor>> tensors;

  const StoredTensor& at(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
      if (n == name) return t;
    }
    throw FormatError("container has no tensor named '" + name + "'");
  }
};

namespace container_detail {

inline std::size_t align_up(std::size_t n) {
  return (n + kContainerAlign - 1) / kContainerAlign * kContainerAlign;
}

template <typename U>
void put(std::vector<std::uint8_t>& out, U value) {
  std::uint8_t bytes[sizeof(U)];
  std::memcpy(bytes, &value, sizeof(U));
  out.insert(out.end(), bytes, bytes + sizeof(U));
}

template <typename U>
U get(const std::vector<std::uint8_t>& in, std::size_t pos) {
  if (pos + sizeof(U) > in.size()) throw FormatError("truncated SABT header");
  U value;
  std::memcpy(&value, in.data() + pos, sizeof(U));
  return value;
}

}  // namespace container_detail

inline std::vector<std::uint8_t> encode_container(const Container& c) {
  using namespace container_detail;
  nlohmann::json meta = c.metadata;
  nlohmann::json index = nlohmann::json::object();
  std::size_t offset = 0;
  for (const auto& [name, t] : c.tensors) {
    if (index.contains(name)) throw FormatError("duplicate tensor name '" + name + "'");
    if (numel(t.shape) != t.data.size()) throw FormatError("tensor '" + name + "' shape/data mismatch");
    index[name] = {{"dtype", "f32"}, {"shape", t.shape}, {"offset", offset}};
    offset = align_up(offset + t.data.size() * sizeof(float));
  }
  meta["tensors"] = std::move(index);
  const std::string text = meta.dump();

  std::vector<std::uint8_t> out;
  out.insert(out.end(), kContainerMagic, kContainerMagic + 4);
  put<std::uint32_t>(out, kContainerVersion);
  put<std::uint64_t>(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  const std::size_t payload_start = align_up(out.size());
  out.resize(payload_start + offset, 0);
  std::size_t pos = payload_start;
  for (const auto& [_, t] : c.tensors) {
    std::memcpy(out.data() + pos, t.data.data(), t.data.size() * sizeof(float));
    pos = payload_start + align_up(pos - payload_start + t.data.size() * sizeof(float));
  }
  return out;
}

inline Container decode_container(const std::vector<std::uint8_t>& bytes) {
  using namespace container_detail;
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kContainerMagic, 4) != 0) {
    throw FormatError("not a SABT file (bad magic)");
  }
  const auto version = get<std::uint32_t>(bytes, 4);
  if (version != kContainerVersion) throw FormatError("unsupported SABT version " + std::to_string(version));
  const auto meta_len = get<std::uint64_t>(bytes, 8);
  if (16 + meta_len > bytes.size()) throw FormatError("truncated SABT metadata");
  Container c;
  try {
    c.metadata = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(meta_len));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("corrupt SABT metadata: ") + e.what());
  }
  if (!c.metadata.is_object() || !c.metadata.contains("tensors") || !c.metadata["tensors"].is_object()) {
    throw FormatError("SABT metadata lacks a tensor index");
  }
  const std::size_t payload_start = align_up(16 + meta_len);
  std::vector<std::pair<std::size_t, std::string>> order;
  for (const auto& [name, entry] : c.metadata["tensors"].items()) {
    order.emplace_back(entry.at("offset").get<std::size_t>(), name);
  }
  std::sort(order.begin(), order.end());
  for (const auto& [offset, name] : order) {
    const auto& entry = c.metadata["tensors"][name];
    if (entry.value("dtype", "") != "f32") throw FormatError("tensor '" + name + "' has unsupported dtype");
    StoredTensor t;
    t.shape = entry.at("shape").get<Shape>();
    const std::size_t n = numel(t.shape);
    const std::size_t begin = payload_start + offset;
    if (begin + n * sizeof(float) > bytes.size()) throw FormatError("tensor '" + name + "' runs past end of file");
    t.data.resize(n);
    std::memcpy(t.data.data(), bytes.data() + begin, n * sizeof(float));
    c.tensors.emplace_back(name, std::move(t));
  }
  c.metadata.erase("tensors");
  return c;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing '" + path + "'");
}

inline void save_container(const std::string& path, const Container& c) {
  write_file_bytes(path, encode_container(c));
}

inline Container load_container(const std::string& path) {
  return decode_container(read_file_bytes(path));
}

/// 64-bit FNV-1a; used for provenance hashes in records and manifests.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a(const std::vector<std::uint8_t>& bytes) {
  return fnv1a(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

inline std::string hex64(std::uint64_t h) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = kDigits[h & 0xF];
    h >>= 4;
  }
  return s;
}

}  // namespace selfablate
