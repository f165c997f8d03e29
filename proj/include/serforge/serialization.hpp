// Copyright 2026 The ser-forge Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Little-endian binary containers:
//
//   SERC (checkpoint): "SERC" u32 version=1, u32 count, then per tensor
//     u16 name_len, name bytes, u8 rank, u32 dims[rank], f32 data row-major.
//   SERF (feature sequence): "SERF" u32 version=1, u32 T, u32 D,
//     T*D f32 row-major.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "serforge/parameters.hpp"

namespace serforge {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

namespace io {

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "' for reading");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::filesystem::path& path,
                       const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("short write to '" + path.string() + "'");
}

class ByteWriter {
 public:
  template <typename U>
  void put(U value) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
    bytes_.insert(bytes_.end(), p, p + sizeof(U));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    U value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return value;
  }

  void get_bytes(void* dst, std::size_t n, const char* what) {
    need(n, what);
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }

  // Checks that `n` more bytes exist; reports expected vs found otherwise.
  void need(std::size_t n, const char* what) const {
    if (remaining() < n) {
      throw FormatError("truncated " + std::string(what) + ": expected " +
                            std::to_string(n) + " " + what + " bytes, found " +
                            std::to_string(remaining()),
                        pos_);
    }
  }

  void expect_magic(std::string_view magic) {
    if (remaining() < magic.size() ||
        std::memcmp(bytes_.data() + pos_, magic.data(), magic.size()) != 0) {
      throw FormatError("bad magic, expected '" + std::string(magic) + "'", pos_);
    }
    pos_ += magic.size();
  }

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace io

inline constexpr std::uint32_t kSercVersion = 1;

inline std::vector<std::uint8_t> encode_checkpoint(const StateDict<float>& state) {
  io::ByteWriter w;
  w.put_bytes("SERC", 4);
  w.put<std::uint32_t>(kSercVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(state.size()));
  for (const auto& entry : state) {
    if (entry.name.size() > 0xFFFF) {
      throw FormatError("tensor name longer than 65535 bytes: " + entry.name);
    }
    w.put<std::uint16_t>(static_cast<std::uint16_t>(entry.name.size()));
    w.put_bytes(entry.name.data(), entry.name.size());
    const auto& shape = entry.value.shape();
    w.put<std::uint8_t>(static_cast<std::uint8_t>(shape.size()));
    for (auto d : shape) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    w.put_bytes(entry.value.data().data(), entry.value.size() * sizeof(float));
  }
  return std::move(w.bytes());
}

inline StateDict<float> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  io::ByteReader r(bytes);
  r.expect_magic("SERC");
  const auto version_at = r.pos();
  const auto version = r.get<std::uint32_t>("header");
  if (version != kSercVersion) {
    throw FormatError("unsupported SERC version " + std::to_string(version),
                      version_at);
  }
  const auto count = r.get<std::uint32_t>("header");
  StateDict<float> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint16_t>("name length");
    std::string name(name_len, '\0');
    r.get_bytes(name.data(), name_len, "name");
    const auto rank_at = r.pos();
    const auto rank = r.get<std::uint8_t>("rank");
    if (rank == 0) throw FormatError("tensor '" + name + "' has rank 0", rank_at);
    Shape shape(rank);
    for (auto& d : shape) {
      const auto dim_at = r.pos();
      d = r.get<std::uint32_t>("dims");
      if (d == 0) {
        throw FormatError("tensor '" + name + "' has a zero dimension", dim_at);
      }
    }
    std::vector<float> data(shape_size(shape));
    r.get_bytes(data.data(), data.size() * sizeof(float), "data");
    out.push_back({std::move(name), Tensor<float>(std::move(shape), std::move(data))});
  }
  if (r.remaining() != 0) {
    throw FormatError("trailing bytes after last tensor", r.pos());
  }
  return out;
}

inline void save_checkpoint(const std::filesystem::path& path,
                            const StateDict<float>& state) {
  io::write_file(path, encode_checkpoint(state));
}

inline StateDict<float> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path));
}

inline constexpr std::uint32_t kSerfVersion = 1;

inline std::vector<std::uint8_t> encode_feature_matrix(const Tensor<float>& m) {
  require_rank(m, 2, "feature matrix");
  io::ByteWriter w;
  w.put_bytes("SERF", 4);
  w.put<std::uint32_t>(kSerfVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(m.dim(0)));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(m.dim(1)));
  w.put_bytes(m.data().data(), m.size() * sizeof(float));
  return std::move(w.bytes());
}

inline Tensor<float> decode_feature_matrix(const std::vector<std::uint8_t>& bytes) {
  io::ByteReader r(bytes);
  r.expect_magic("SERF");
  const auto version_at = r.pos();
  const auto version = r.get<std::uint32_t>("header");
  if (version != kSerfVersion) {
    throw FormatError("unsupported SERF version " + std::to_string(version),
                      version_at);
  }
  const auto frames = r.get<std::uint32_t>("header");
  const auto dims = r.get<std::uint32_t>("header");
  if (frames == 0) throw DataError("feature file has T == 0 frames");
  if (dims == 0) throw DataError("feature file has D == 0 dimensions");
  const std::size_t n = static_cast<std::size_t>(frames) * dims;
  std::vector<float> data(n);
  r.get_bytes(data.data(), n * sizeof(float), "data");
  if (r.remaining() != 0) {
    throw FormatError("trailing bytes after feature payload", r.pos());
  }
  return Tensor<float>(Shape{frames, dims}, std::move(data));
}

// FNV-1a 64-bit, used for run manifests and skip-if-unchanged checks.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t hash = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const std::uint8_t*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    hash ^= p[i];
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

inline std::uint64_t fnv1a64(const std::vector<std::uint8_t>& bytes) {
  return fnv1a64(bytes.data(), bytes.size());
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) out[static_cast<std::size_t>(i)] = kDigits[v & 0xF];
  return out;
}

}  // namespace serforge
