#pragma once

// Flat binary parameter checkpoints.
//
//   "EUDA" | u32 version | { u32 name_len | name bytes | u32 rank |
//                            u32 dims[rank] | f64 payload[prod(dims)] }*
//
// All integers and floats are little-endian. Entries run to end of file.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "edgeuda/tensor.hpp"

namespace edgeuda {

inline constexpr char kCheckpointMagic[4] = {'E', 'U', 'D', 'A'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_f64(std::ostream& os, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline bool get_u32(std::istream& is, std::uint32_t& v) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
  v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return true;
}

inline double get_f64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw DataError("checkpoint: truncated payload");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const NamedTensors& entries) {
  os.write(kCheckpointMagic, 4);
  detail::put_u32(os, kCheckpointVersion);
  for (const auto& [name, t] : entries) {
    detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) detail::put_u32(os, static_cast<std::uint32_t>(d));
    for (double v : t.data()) detail::put_f64(os, v);
  }
  if (!os) throw DataError("checkpoint: write failed");
}

inline NamedTensors read_checkpoint(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw DataError("checkpoint: bad magic bytes");
  std::uint32_t version = 0;
  if (!detail::get_u32(is, version)) throw DataError("checkpoint: missing version");
  if (version != kCheckpointVersion)
    throw DataError("checkpoint: unsupported version " + std::to_string(version));
  NamedTensors out;
  std::uint32_t name_len = 0;
  while (detail::get_u32(is, name_len)) {
    if (name_len > (1u << 16)) throw DataError("checkpoint: implausible name length");
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw DataError("checkpoint: truncated name");
    std::uint32_t rank = 0;
    if (!detail::get_u32(is, rank) || rank > 8) throw DataError("checkpoint: bad rank for " + name);
    Shape shape(rank);
    for (auto& d : shape) {
      std::uint32_t v = 0;
      if (!detail::get_u32(is, v)) throw DataError("checkpoint: truncated dims for " + name);
      d = v;
    }
    std::vector<double> data(shape_numel(shape));
    for (double& v : data) v = detail::get_f64(is);
    out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  return out;
}

inline void save_checkpoint(const std::string& path, const NamedTensors& entries) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path + " for writing");
  write_checkpoint(os, entries);
}

inline NamedTensors load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path);
  return read_checkpoint(is);
}

}  // namespace edgeuda
