#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "vsep/autodiff.hpp"
#include "vsep/common.hpp"

namespace vsep {

// Checkpoint layout (all integers little-endian):
//   magic "VSEPCKPT" (8 bytes), u32 version, u64 record count, then per
//   record: u32 name length, name bytes, u32 rank, u32 dims[rank],
//   f64 values (little-endian bit pattern). Round trips are bit-exact.
namespace ckpt {

constexpr char kMagic[9] = "VSEPCKPT";
constexpr std::uint32_t kVersion = 1;

inline void put_u32(std::ostream& o, std::uint32_t v) {
  char b[4] = {char(v & 0xff), char((v >> 8) & 0xff), char((v >> 16) & 0xff),
               char((v >> 24) & 0xff)};
  o.write(b, 4);
}
inline void put_u64(std::ostream& o, std::uint64_t v) {
  put_u32(o, static_cast<std::uint32_t>(v & 0xffffffffULL));
  put_u32(o, static_cast<std::uint32_t>(v >> 32));
}
inline void put_f64(std::ostream& o, double d) {
  put_u64(o, std::bit_cast<std::uint64_t>(d));
}
inline std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
         std::uint32_t(b[3]) << 24;
}
inline std::uint64_t get_u64(std::istream& in) {
  const std::uint64_t lo = get_u32(in);
  const std::uint64_t hi = get_u32(in);
  return lo | hi << 32;
}
inline double get_f64(std::istream& in) { return std::bit_cast<double>(get_u64(in)); }

}  // namespace ckpt

// Writes every registered tensor (trainable parameters and buffers such as
// batch-norm running statistics) in registry order.
inline void save_checkpoint(const ad::Graph& g, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint: " + path);
  f.write(ckpt::kMagic, 8);
  ckpt::put_u32(f, ckpt::kVersion);
  ckpt::put_u64(f, g.registry().size());
  for (const auto& e : g.registry()) {
    ckpt::put_u32(f, static_cast<std::uint32_t>(e.name.size()));
    f.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    ckpt::put_u32(f, static_cast<std::uint32_t>(e.tensor->shape.size()));
    for (int d : e.tensor->shape) ckpt::put_u32(f, static_cast<std::uint32_t>(d));
    for (double v : e.tensor->data) ckpt::put_f64(f, v);
  }
  if (!f) throw IoError("short write to checkpoint: " + path);
}

// Loads values into an already-constructed graph; record names and shapes
// must match the registry exactly.
inline void load_checkpoint(ad::Graph& g, const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint: " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, ckpt::kMagic, 8) != 0) {
    throw IoError("not a checkpoint file: " + path);
  }
  const std::uint32_t version = ckpt::get_u32(f);
  if (version != ckpt::kVersion) {
    throw IoError("unsupported checkpoint version in " + path);
  }
  const std::uint64_t count = ckpt::get_u64(f);
  if (count != g.registry().size()) {
    throw ValueError("checkpoint/config mismatch: record count differs in " + path);
  }
  for (const auto& e : g.registry()) {
    const std::uint32_t name_len = ckpt::get_u32(f);
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    if (!f || name != e.name) {
      throw ValueError("checkpoint/config mismatch: expected record '" + e.name + "' in " + path);
    }
    const std::uint32_t rank = ckpt::get_u32(f);
    std::vector<int> shape(rank);
    for (auto& d : shape) d = static_cast<int>(ckpt::get_u32(f));
    if (shape != e.tensor->shape) {
      throw ValueError("checkpoint/config mismatch: shape differs for '" + e.name + "'");
    }
    for (auto& v : e.tensor->data) v = ckpt::get_f64(f);
    if (!f) throw IoError("truncated checkpoint: " + path);
  }
}

}  // namespace vsep
