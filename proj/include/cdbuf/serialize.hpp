#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdbuf/errors.hpp"
#include "cdbuf/tensor.hpp"

namespace cdbuf {

// Binary array container shared by the "cdstats-1" and "cdckpt-1" formats.
// Layout (documented in docs/formats.md):
//   bytes 0..7   magic "CDBUFBIN"
//   bytes 8..15  u64 LE manifest length M
//   bytes 16..   manifest: M bytes of UTF-8 JSON
//   then         per manifest arrays[] entry, in order: count * 8 bytes of
//                IEEE-754 binary64 little-endian, row-major
// The manifest carries a "format" string, free-form metadata, and an
// "arrays" list of {name, shape}. Round-trips are bit-exact.

struct ArchiveArray {
  std::string name;
  Shape shape;
  std::vector<double> data;
};

struct Archive {
  nlohmann::ordered_json meta;  // includes "format"
  std::vector<ArchiveArray> arrays;

  const ArchiveArray& find(const std::string& name) const {
    for (const auto& a : arrays)
      if (a.name == name) return a;
    throw IoError("archive: missing array '" + name + "'");
  }
};

namespace detail {

inline void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

inline void put_f64_le(std::string& out, double d) {
  put_u64_le(out, std::bit_cast<std::uint64_t>(d));
}

inline double get_f64_le(const unsigned char* p) {
  return std::bit_cast<double>(get_u64_le(p));
}

}  // namespace detail

inline void write_archive(const std::string& path, const Archive& ar) {
  nlohmann::ordered_json manifest = ar.meta;
  nlohmann::ordered_json arrays = nlohmann::ordered_json::array();
  for (const auto& a : ar.arrays) {
    if (static_cast<std::int64_t>(a.data.size()) != numel_of(a.shape)) {
      throw IoError("archive: array '" + a.name + "' size does not match shape");
    }
    arrays.push_back({{"name", a.name}, {"shape", a.shape}});
  }
  manifest["arrays"] = arrays;

  std::string buf = "CDBUFBIN";
  const std::string mjson = manifest.dump();
  detail::put_u64_le(buf, mjson.size());
  buf += mjson;
  for (const auto& a : ar.arrays)
    for (double d : a.data) detail::put_f64_le(buf, d);

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("archive: cannot open '" + path + "' for writing");
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!os) throw IoError("archive: short write to '" + path + "'");
}

inline Archive read_archive(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("archive: cannot open '" + path + "'");
  std::string buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (buf.size() < 16 || buf.compare(0, 8, "CDBUFBIN") != 0) {
    throw IoError("archive: '" + path + "' is not a cdbuf archive");
  }
  const auto* p = reinterpret_cast<const unsigned char*>(buf.data());
  const std::uint64_t mlen = detail::get_u64_le(p + 8);
  if (16 + mlen > buf.size()) throw IoError("archive: truncated manifest in '" + path + "'");
  Archive ar;
  try {
    ar.meta = nlohmann::ordered_json::parse(buf.substr(16, mlen));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("archive: bad manifest in '" + path + "': " + e.what());
  }
  std::size_t off = 16 + mlen;
  for (const auto& entry : ar.meta.at("arrays")) {
    ArchiveArray a;
    a.name = entry.at("name").get<std::string>();
    a.shape = entry.at("shape").get<Shape>();
    const auto count = static_cast<std::size_t>(numel_of(a.shape));
    if (off + count * 8 > buf.size()) {
      throw IoError("archive: truncated array '" + a.name + "' in '" + path + "'");
    }
    a.data.resize(count);
    for (std::size_t i = 0; i < count; ++i) a.data[i] = detail::get_f64_le(p + off + i * 8);
    off += count * 8;
    ar.arrays.push_back(std::move(a));
  }
  ar.meta.erase("arrays");
  return ar;
}

// FNV-1a over raw bytes; used for dataset/weight fingerprints.
inline std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a_doubles(std::span<const double> v, std::uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a(v.data(), v.size() * sizeof(double), h);
}

}  // namespace cdbuf
