// SPDX-License-Identifier: Apache-2.0
//
// Binary tensor container ("OODT") and the JSON-lines manifest sidecar.
//
//   magic "OODT" | version u32 | entry_count u32 |
//   entry_count x { name_len u16 | name | dtype u8 | ndim u8 | ndim x u64 dims | payload }
//
// All integers and payloads are little-endian; no padding, no checksum.
// Entries are written sorted by name (byte order), and readers insist on
// that order so every valid file has exactly one encoding.
#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "oodkit/error.hpp"
#include "oodkit/tensor.hpp"

namespace oodkit::store {

inline constexpr char kMagic[4] = {'O', 'O', 'D', 'T'};
inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::size_t kMaxNameBytes = 255;

using TensorMap = std::map<std::string, Tensor>;
using NamedTensor = std::pair<std::string, Tensor>;

struct ReadOptions {
  bool allow_nonfinite = false;
};

namespace detail {

inline bool valid_utf8(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t extra = 0;
    std::uint32_t cp = 0;
    if (c < 0x80) {
      extra = 0;
      cp = c;
    } else if ((c & 0xE0) == 0xC0) {
      extra = 1;
      cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      extra = 2;
      cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
      extra = 3;
      cp = c & 0x07;
    } else {
      return false;
    }
    if (i + extra >= s.size()) return false;
    for (std::size_t k = 1; k <= extra; ++k) {
      const auto cc = static_cast<unsigned char>(s[i + k]);
      if ((cc & 0xC0) != 0x80) return false;
      cp = (cp << 6) | (cc & 0x3F);
    }
    // Overlong forms, surrogates and out-of-range code points.
    if ((extra == 1 && cp < 0x80) || (extra == 2 && cp < 0x800) || (extra == 3 && cp < 0x10000) ||
        (cp >= 0xD800 && cp <= 0xDFFF) || cp > 0x10FFFF) {
      return false;
    }
    i += extra + 1;
  }
  return true;
}

inline void check_name(std::string_view name) {
  if (name.empty()) throw Error(ErrorCode::bad_name, "entry name is empty");
  if (name.size() > kMaxNameBytes) throw Error(ErrorCode::bad_name, "entry name exceeds 255 bytes");
  for (char ch : name) {
    const auto c = static_cast<unsigned char>(ch);
    if (c < 0x20 || c == 0x7F) throw Error(ErrorCode::bad_name, "entry name has control characters");
  }
  if (!valid_utf8(name)) throw Error(ErrorCode::bad_name, "entry name is not valid UTF-8");
}

template <typename T>
void put_le(std::string& out, T v) {
  using U = std::make_unsigned_t<T>;
  const auto u = static_cast<U>(v);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(std::string_view buf) : buf_(buf) {}

  template <typename T>
  T le(const char* what) {
    need(sizeof(T), what);
    std::make_unsigned_t<T> u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      u |= static_cast<std::make_unsigned_t<T>>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(u);
  }

  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    auto s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const noexcept { return buf_.size() - pos_; }
  std::size_t position() const noexcept { return pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (buf_.size() - pos_ < n) {
      throw Error(ErrorCode::truncated, std::string("truncated file: ends inside ") + what + " at offset " +
                                            std::to_string(pos_));
    }
  }

  std::string_view buf_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Serializes entries to the container byte layout. Input order does not
/// matter; duplicates are rejected.
inline std::string encode_container(std::vector<NamedTensor> entries) {
  std::sort(entries.begin(), entries.end(),
            [](const NamedTensor& a, const NamedTensor& b) { return a.first < b.first; });
  for (std::size_t i = 0; i < entries.size(); ++i) {
    detail::check_name(entries[i].first);
    if (i > 0 && entries[i].first == entries[i - 1].first) {
      throw Error(ErrorCode::duplicate_name, "entry '" + entries[i].first + "' appears twice");
    }
    if (entries[i].second.rank() > 255) throw Error(ErrorCode::bad_shape, "rank exceeds 255");
    if (entries[i].second.numel() == 0) {
      throw Error(ErrorCode::bad_shape, "entry '" + entries[i].first + "' is empty");
    }
  }
  if (entries.size() > UINT32_MAX) throw Error(ErrorCode::oversized, "too many entries");

  std::string out(kMagic, 4);
  detail::put_le<std::uint32_t>(out, kVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(t.dtype()));
    out.push_back(static_cast<char>(t.rank()));
    for (std::uint64_t d : t.shape()) detail::put_le<std::uint64_t>(out, d);
    if (t.dtype() == DType::f32) {
      for (float v : t.f32_data()) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
    } else {
      for (std::int64_t v : t.i64_data()) detail::put_le<std::int64_t>(out, v);
    }
  }
  return out;
}

inline std::string encode_container(const TensorMap& entries) {
  return encode_container(std::vector<NamedTensor>(entries.begin(), entries.end()));
}

inline TensorMap decode_container(std::string_view buf, ReadOptions opts = {}) {
  detail::Reader r(buf);
  const auto magic = r.take(4, "magic");
  if (magic != std::string_view(kMagic, 4)) throw Error(ErrorCode::bad_magic, "file does not start with OODT");
  const auto version = r.le<std::uint32_t>("version");
  if (version != kVersion) {
    throw Error(ErrorCode::unsupported_version, "version " + std::to_string(version));
  }
  const auto count = r.le<std::uint32_t>("entry count");

  TensorMap out;
  std::string previous;
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto name_len = r.le<std::uint16_t>("name length");
    std::string name(r.take(name_len, "entry name"));
    detail::check_name(name);
    if (e > 0 && !(previous < name)) {
      throw Error(name == previous ? ErrorCode::duplicate_name : ErrorCode::bad_name,
                  "entry '" + name + "' is out of order", e);
    }
    const auto dtype_byte = r.le<std::uint8_t>("dtype");
    if (dtype_byte != 1 && dtype_byte != 2) {
      throw Error(ErrorCode::bad_dtype, "dtype code " + std::to_string(dtype_byte) + " in '" + name + "'", e);
    }
    const auto dtype = static_cast<DType>(dtype_byte);
    const auto ndim = r.le<std::uint8_t>("ndim");
    if (ndim == 0) throw Error(ErrorCode::bad_shape, "entry '" + name + "' has rank 0", e);
    Tensor::Shape shape(ndim);
    for (auto& d : shape) {
      d = r.le<std::uint64_t>("dims");
      if (d == 0) throw Error(ErrorCode::bad_shape, "entry '" + name + "' has a zero-length dimension", e);
    }
    const std::uint64_t n = checked_numel(shape);
    const std::size_t width = dtype == DType::f32 ? 4 : 8;
    if (n > r.remaining() / width) {
      throw Error(ErrorCode::truncated, "truncated payload: entry '" + name + "' needs " + std::to_string(n * width) +
                                            " bytes, " + std::to_string(r.remaining()) + " left", e);
    }
    const auto payload = r.take(static_cast<std::size_t>(n * width), "payload");
    detail::Reader p(payload);
    if (dtype == DType::f32) {
      std::vector<float> data(static_cast<std::size_t>(n));
      for (auto& v : data) v = std::bit_cast<float>(p.le<std::uint32_t>("payload"));
      Tensor t = Tensor::f32(std::move(shape), std::move(data));
      if (!opts.allow_nonfinite && !t.all_finite()) {
        throw Error(ErrorCode::non_finite, "entry '" + name + "' contains NaN or Inf", e);
      }
      out.emplace(name, std::move(t));
    } else {
      std::vector<std::int64_t> data(static_cast<std::size_t>(n));
      for (auto& v : data) v = p.le<std::int64_t>("payload");
      out.emplace(name, Tensor::i64(std::move(shape), std::move(data)));
    }
    previous = std::move(name);
  }
  if (r.remaining() != 0) {
    throw Error(ErrorCode::trailing_data, std::to_string(r.remaining()) + " bytes after the last entry");
  }
  return out;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw Error(ErrorCode::io, "read failed for " + path.string());
  return std::move(ss).str();
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, "cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::io, "write failed for " + path.string());
}

inline void write_container(const std::filesystem::path& path, std::vector<NamedTensor> entries) {
  write_file(path, encode_container(std::move(entries)));
}

inline void write_container(const std::filesystem::path& path, const TensorMap& entries) {
  write_file(path, encode_container(entries));
}

inline TensorMap read_container(const std::filesystem::path& path, ReadOptions opts = {}) {
  return decode_container(read_file(path), opts);
}

/// Builds a bundle from a decoded container. Expects "features" and
/// optionally "logits" and "labels"; other entries are ignored.
inline FeatureBundle bundle_from_entries(TensorMap entries, SplitRole role, std::string name) {
  auto take = [&](const char* key) -> std::optional<Tensor> {
    auto it = entries.find(key);
    if (it == entries.end()) return std::nullopt;
    return std::move(it->second);
  };
  auto features = take("features");
  if (!features) throw Error(ErrorCode::missing_entry, "container has no 'features' entry");
  return FeatureBundle(std::move(name), role, std::move(*features), take("logits"), take("labels"));
}

inline FeatureBundle load_bundle(const std::filesystem::path& path, SplitRole role,
                                 std::string name = {}) {
  if (name.empty()) name = path.stem().string();
  return bundle_from_entries(read_container(path), role, std::move(name));
}

inline std::vector<NamedTensor> bundle_entries(const FeatureBundle& b) {
  std::vector<NamedTensor> entries{{"features", b.features()}};
  if (b.logits()) entries.emplace_back("logits", *b.logits());
  if (b.labels()) entries.emplace_back("labels", *b.labels());
  return entries;
}

inline void save_bundle(const std::filesystem::path& path, const FeatureBundle& b) {
  write_container(path, bundle_entries(b));
}

/// Head containers hold "weights" (C x D) and "bias" (C).
inline ClassifierHead load_head(const std::filesystem::path& path) {
  auto entries = read_container(path);
  auto w = entries.find("weights");
  auto b = entries.find("bias");
  if (w == entries.end() || b == entries.end()) {
    throw Error(ErrorCode::missing_entry, "head container needs 'weights' and 'bias'");
  }
  return ClassifierHead(w->second, b->second);
}

inline void save_head(const std::filesystem::path& path, const ClassifierHead& head) {
  write_container(path, std::vector<NamedTensor>{{"bias", head.bias()}, {"weights", head.weights()}});
}

struct ManifestEntry {
  std::string id;
  std::string path;
  SplitRole split = SplitRole::ood;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

inline std::vector<ManifestEntry> parse_manifest(std::istream& in) {
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("id").get<std::string>(), j.at("path").get<std::string>(),
                     parse_split_role(j.at("split").get<std::string>())});
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::parse, "manifest line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot open " + path.string());
  return parse_manifest(in);
}

inline nlohmann::ordered_json manifest_record(const ManifestEntry& e) {
  return {{"id", e.id}, {"path", e.path}, {"split", to_string(e.split)}};
}

}  // namespace oodkit::store
