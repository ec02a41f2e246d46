#pragma once

// GTNSR1 tensor files and named tensor archives (checkpoints).
//
// Tensor:  "GTNSR1" | rank:u64 | dims:u64[rank] | payload:f64[numel]
// Archive: "GCKPT1" | count:u64 | index | blobs
//          index entry = name_len:u64 | name | offset:u64 | size:u64
//          offsets are relative to the first blob; each blob is a GTNSR1 tensor.
// All integers and floats are little-endian.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gscd/errors.hpp"
#include "gscd/tensor.hpp"

namespace gscd {

inline constexpr std::array<char, 6> kTensorMagic{'G', 'T', 'N', 'S', 'R', '1'};
inline constexpr std::array<char, 6> kArchiveMagic{'G', 'C', 'K', 'P', 'T', '1'};

namespace detail {

inline void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}

inline std::uint64_t get_u64(std::istream& is, const char* what) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw FormatError(std::string("truncated ") + what);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline void expect_magic(std::istream& is, const std::array<char, 6>& magic, const char* what) {
  char b[6];
  if (!is.read(b, 6) || std::memcmp(b, magic.data(), 6) != 0) throw FormatError(std::string("bad magic in ") + what);
}

}  // namespace detail

inline void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kTensorMagic.data(), 6);
  detail::put_u64(os, t.rank());
  for (auto d : t.shape()) detail::put_u64(os, d);
  for (double v : t.data()) detail::put_u64(os, std::bit_cast<std::uint64_t>(v));
}

inline Tensor read_tensor(std::istream& is) {
  detail::expect_magic(is, kTensorMagic, "tensor");
  const auto rank = detail::get_u64(is, "tensor rank");
  if (rank == 0 || rank > 16) throw FormatError("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  std::uint64_t n = 1;
  for (auto& d : shape) {
    d = detail::get_u64(is, "tensor dims");
    if (d == 0 || d > (1ULL << 32)) throw FormatError("implausible tensor dim " + std::to_string(d));
    n *= d;
    if (n > (1ULL << 34)) throw FormatError("tensor too large");
  }
  std::vector<double> data(n);
  for (auto& v : data) v = std::bit_cast<double>(detail::get_u64(is, "tensor payload"));
  return Tensor::from(std::move(shape), std::move(data));
}

inline void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
  if (!os) throw IoError("write failed for " + path.string());
}

inline Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  try {
    return read_tensor(is);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

using TensorArchive = std::vector<std::pair<std::string, Tensor>>;

inline void save_archive(const std::filesystem::path& path, const TensorArchive& entries) {
  std::vector<std::string> blobs;
  for (const auto& [name, t] : entries) {
    std::ostringstream os(std::ios::binary);
    write_tensor(os, t);
    blobs.push_back(std::move(os).str());
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(kArchiveMagic.data(), 6);
  detail::put_u64(os, entries.size());
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    detail::put_u64(os, entries[i].first.size());
    os.write(entries[i].first.data(), static_cast<std::streamsize>(entries[i].first.size()));
    detail::put_u64(os, offset);
    detail::put_u64(os, blobs[i].size());
    offset += blobs[i].size();
  }
  for (const auto& b : blobs) os.write(b.data(), static_cast<std::streamsize>(b.size()));
  if (!os) throw IoError("write failed for " + path.string());
}

inline TensorArchive load_archive(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  detail::expect_magic(is, kArchiveMagic, "archive");
  const auto count = detail::get_u64(is, "archive count");
  if (count > (1ULL << 20)) throw FormatError("implausible archive entry count");
  std::vector<std::string> names;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = detail::get_u64(is, "archive name length");
    if (len > 4096) throw FormatError("implausible archive name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), static_cast<std::streamsize>(len))) throw FormatError("truncated archive name");
    detail::get_u64(is, "archive offset");
    detail::get_u64(is, "archive size");
    names.push_back(std::move(name));
  }
  TensorArchive out;
  for (auto& name : names) out.emplace_back(std::move(name), read_tensor(is));
  return out;
}

inline const Tensor& archive_get(const TensorArchive& a, const std::string& name) {
  for (const auto& [n, t] : a) {
    if (n == name) return t;
  }
  throw FormatError("archive has no entry '" + name + "'");
}

}  // namespace gscd
