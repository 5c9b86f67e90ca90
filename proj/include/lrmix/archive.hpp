#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lrmix/autograd.hpp"
#include "lrmix/tensor.hpp"

// Named-tensor archive. All integers little-endian.
//
//   bytes 0..7   magic "LRMXTNSR"
//   u32          format version (1)
//   u32          metadata length M, then M bytes of UTF-8 key-value text
//   u32          entry count E
//   E times:     u16 name length L, L name bytes, u8 dtype (1 = f32),
//                u8 rank R, R x u64 dimensions
//   payloads     for each entry in header order, prod(dims) IEEE-754 f32
//
// Layout details are also documented in docs/archive_format.md.

namespace lrmix {

inline constexpr char kArchiveMagic[8] = {'L', 'R', 'M', 'X', 'T', 'N', 'S', 'R'};
inline constexpr std::uint32_t kArchiveVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 1;

struct TensorArchive {
  std::string metadata;
  std::vector<std::pair<std::string, Tensor<float>>> entries;

  const Tensor<float>* find(const std::string& name) const {
    for (const auto& [n, t] : entries)
      if (n == name) return &t;
    return nullptr;
  }
  void add(std::string name, Tensor<float> t) { entries.emplace_back(std::move(name), std::move(t)); }
};

namespace detail {

template <class U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::string origin) : bytes_(bytes), origin_(std::move(origin)) {}

  template <class U>
  U get() {
    need(sizeof(U));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return static_cast<U>(v);
  }
  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw IngestionError(origin_ + ": truncated tensor archive");
  }
  const std::string& bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_archive(const TensorArchive& archive) {
  std::string out(kArchiveMagic, sizeof(kArchiveMagic));
  detail::put_le<std::uint32_t>(out, kArchiveVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(archive.metadata.size()));
  out += archive.metadata;
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(archive.entries.size()));
  for (const auto& [name, t] : archive.entries) {
    if (name.size() > 0xffff) throw UsageError("archive entry name too long: " + name);
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    detail::put_le<std::uint8_t>(out, kDtypeF32);
    detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) detail::put_le<std::uint64_t>(out, d);
  }
  for (const auto& [name, t] : archive.entries)
    for (float v : t.data()) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, sizeof(bits));
      detail::put_le<std::uint32_t>(out, bits);
    }
  return out;
}

inline TensorArchive deserialize_archive(const std::string& bytes, const std::string& origin = "<memory>") {
  detail::ByteReader in(bytes, origin);
  if (in.take(sizeof(kArchiveMagic)) != std::string(kArchiveMagic, sizeof(kArchiveMagic)))
    throw IngestionError(origin + ": not a tensor archive (bad magic)");
  if (const auto version = in.get<std::uint32_t>(); version != kArchiveVersion)
    throw IngestionError(origin + ": unsupported archive version " + std::to_string(version));
  TensorArchive archive;
  archive.metadata = in.take(in.get<std::uint32_t>());
  const auto count = in.get<std::uint32_t>();
  std::vector<std::pair<std::string, Shape>> headers;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = in.take(in.get<std::uint16_t>());
    if (in.get<std::uint8_t>() != kDtypeF32) throw IngestionError(origin + ": entry " + name + " has unsupported dtype");
    const auto rank = in.get<std::uint8_t>();
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(in.get<std::uint64_t>());
    headers.emplace_back(std::move(name), std::move(shape));
  }
  for (auto& [name, shape] : headers) {
    Tensor<float> t(shape);
    for (auto& v : t.data()) {
      const auto bits = in.get<std::uint32_t>();
      std::memcpy(&v, &bits, sizeof(v));
    }
    archive.entries.emplace_back(std::move(name), std::move(t));
  }
  if (!in.done()) throw IngestionError(origin + ": trailing bytes after tensor payloads");
  return archive;
}

inline void write_archive(const std::string& path, const TensorArchive& archive) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestionError("cannot write archive " + path);
  const auto bytes = serialize_archive(archive);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IngestionError("failed writing archive " + path);
}

inline TensorArchive read_archive(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open archive " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return deserialize_archive(ss.str(), path);
}

/// Appends every parameter and buffer of `state` under its name.
template <class T>
void export_state(const NamedState<T>& state, TensorArchive& archive) {
  for (const auto& [name, p] : state.parameters) archive.add(name, p->value().template cast<float>());
  for (const auto& [name, t] : state.buffers) archive.add(name, t->template cast<float>());
}

/// Loads every parameter and buffer of `state` from the archive; missing
/// entries and shape mismatches are ingestion errors.
template <class T>
void import_state(NamedState<T>& state, const TensorArchive& archive, const std::string& origin = "<archive>") {
  auto fetch = [&](const std::string& name, Tensor<T>& dst) {
    const Tensor<float>* src = archive.find(name);
    if (!src) throw IngestionError(origin + ": missing tensor " + name);
    if (src->shape() != dst.shape())
      throw IngestionError(origin + ": tensor " + name + " has shape " + shape_str(src->shape()) + ", expected " +
                           shape_str(dst.shape()));
    dst = src->template cast<T>();
  };
  for (auto& [name, p] : state.parameters) fetch(name, p->value());
  for (auto& [name, t] : state.buffers) fetch(name, *t);
}

}  // namespace lrmix
