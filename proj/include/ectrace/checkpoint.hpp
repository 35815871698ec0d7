// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container, all integers little-endian:
//
//   "ECTRCKPT" u32 version u32 count
//   count x { u32 name_len, name, u8 dtype (1 = f32, 2 = f64),
//             u32 rank, u64 dims[rank], raw values }
//   u64 meta_len, meta (JSON text)

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ectrace/autodiff.hpp"

namespace ectrace {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StoredTensor {
  std::string name;
  ad::Shape shape;
  bool is_double = false;
  std::vector<double> values;
};

struct Checkpoint {
  std::vector<StoredTensor> tensors;
  nlohmann::json metadata = nlohmann::json::object();

  const StoredTensor& at(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return t;
    }
    throw CheckpointError("checkpoint has no tensor '" + name + "'");
  }
};

namespace detail {

inline constexpr char kCkptMagic[8] = {'E', 'C', 'T', 'R', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCkptVersion = 1;

template <class U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <class U>
U get_le(std::istream& in) {
  unsigned char buf[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(U))) throw CheckpointError("truncated checkpoint");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
  return v;
}

template <class T>
void put_real(std::string& out, T v) {
  if constexpr (sizeof(T) == 4) {
    put_le(out, std::bit_cast<std::uint32_t>(v));
  } else {
    put_le(out, std::bit_cast<std::uint64_t>(v));
  }
}

}  // namespace detail

/// Writes to a temporary sibling and renames it into place.
inline void write_atomic(const std::filesystem::path& path, const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot open " + tmp.string() + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw CheckpointError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

template <class T>
std::string encode_checkpoint(const std::vector<std::pair<std::string, ad::Tensor<T>>>& named,
                              const nlohmann::json& metadata) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  std::string out(detail::kCkptMagic, 8);
  detail::put_le<std::uint32_t>(out, detail::kCkptVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(named.size()));
  for (const auto& [name, t] : named) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(sizeof(T) == 4 ? 1 : 2));
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) detail::put_le<std::uint64_t>(out, d);
    for (T v : t.values()) detail::put_real(out, v);
  }
  const std::string meta = metadata.dump();
  detail::put_le<std::uint64_t>(out, meta.size());
  out += meta;
  return out;
}

template <class T>
void write_checkpoint(const std::filesystem::path& path,
                      const std::vector<std::pair<std::string, ad::Tensor<T>>>& named,
                      const nlohmann::json& metadata) {
  write_atomic(path, encode_checkpoint(named, metadata));
}

inline Checkpoint decode_checkpoint(std::istream& in) {
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, detail::kCkptMagic, 8) != 0) {
    throw CheckpointError("not a checkpoint file");
  }
  const auto version = detail::get_le<std::uint32_t>(in);
  if (version != detail::kCkptVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  const auto count = detail::get_le<std::uint32_t>(in);
  for (std::uint32_t k = 0; k < count; ++k) {
    StoredTensor t;
    t.name.resize(detail::get_le<std::uint32_t>(in));
    if (!in.read(t.name.data(), static_cast<std::streamsize>(t.name.size()))) throw CheckpointError("truncated checkpoint");
    const auto dtype = detail::get_le<std::uint8_t>(in);
    if (dtype != 1 && dtype != 2) throw CheckpointError("unknown dtype in tensor '" + t.name + "'");
    t.is_double = dtype == 2;
    const auto rank = detail::get_le<std::uint32_t>(in);
    for (std::uint32_t r = 0; r < rank; ++r) t.shape.push_back(detail::get_le<std::uint64_t>(in));
    const std::size_t n = ad::numel_of(t.shape);
    t.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      t.values[i] = t.is_double ? std::bit_cast<double>(detail::get_le<std::uint64_t>(in))
                                : static_cast<double>(std::bit_cast<float>(detail::get_le<std::uint32_t>(in)));
    }
    ck.tensors.push_back(std::move(t));
  }
  std::string meta(detail::get_le<std::uint64_t>(in), '\0');
  if (!in.read(meta.data(), static_cast<std::streamsize>(meta.size()))) throw CheckpointError("truncated checkpoint");
  ck.metadata = nlohmann::json::parse(meta);
  return ck;
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open " + path.string());
  return decode_checkpoint(f);
}

/// Copies stored values into same-named, same-shaped tensors.
template <class T>
void load_into(const Checkpoint& ck, std::vector<std::pair<std::string, ad::Tensor<T>>>& named) {
  for (auto& [name, t] : named) {
    const auto& s = ck.at(name);
    if (s.shape != t.shape()) {
      throw CheckpointError("tensor '" + name + "' has shape " + ad::shape_str(s.shape) + ", expected " +
                            ad::shape_str(t.shape()));
    }
    for (std::size_t i = 0; i < s.values.size(); ++i) t[i] = static_cast<T>(s.values[i]);
  }
}

}  // namespace ectrace
