#pragma once

// Versioned binary checkpoint container. Layout (all integers and floats
// little-endian, written byte-by-byte so the format is host-independent):
//
//   magic   8 bytes  "CRNCKPT\0"
//   u32     format version (currently 1)
//   u64     config text length, followed by that many bytes (resolved
//           dotted-key config echo)
//   u64     iteration
//   u64 x2  training-stream RNG state (state, inc)
//   u64 x2  evaluation-stream RNG state (state, inc)
//   u64     adam step counter t
//   u32     parameter count N, then N blobs
//   u32     adam first-moment count (0 or N), then that many blobs
//   u32     adam second-moment count (0 or N), then that many blobs
//
// blob:     u32 name length + name bytes, u32 rank, u32 dims[rank],
//           f32 data[prod(dims)] as little-endian IEEE-754 bit patterns

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "crn/random.hpp"
#include "crn/tensor.hpp"

namespace crn {

struct ParamBlob {
  std::string name;
  std::vector<int> dims;
  std::vector<float> data;
};

struct Checkpoint {
  std::uint32_t version = 1;
  std::string config_text;
  std::int64_t iteration = 0;
  Pcg32::State train_rng;
  Pcg32::State eval_rng;
  std::int64_t adam_t = 0;
  std::vector<ParamBlob> params;
  std::vector<ParamBlob> adam_m;
  std::vector<ParamBlob> adam_v;
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}

inline void put_f32(std::ostream& os, float f) {
  put_u32(os, std::bit_cast<std::uint32_t>(f));
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline float get_f32(std::istream& is) {
  return std::bit_cast<float>(get_u32(is));
}

inline void put_blob(std::ostream& os, const ParamBlob& b) {
  put_u32(os, static_cast<std::uint32_t>(b.name.size()));
  os.write(b.name.data(), static_cast<std::streamsize>(b.name.size()));
  put_u32(os, static_cast<std::uint32_t>(b.dims.size()));
  std::size_t numel = 1;
  for (int d : b.dims) {
    put_u32(os, static_cast<std::uint32_t>(d));
    numel *= static_cast<std::size_t>(d);
  }
  if (numel != b.data.size()) {
    throw std::invalid_argument("checkpoint: blob '" + b.name +
                                "' dims do not match data");
  }
  for (float f : b.data) put_f32(os, f);
}

inline ParamBlob get_blob(std::istream& is) {
  ParamBlob b;
  const std::uint32_t nl = get_u32(is);
  b.name.resize(nl);
  is.read(b.name.data(), nl);
  const std::uint32_t rank = get_u32(is);
  if (rank > 3) throw std::runtime_error("checkpoint: blob rank > 3");
  std::size_t numel = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const std::uint32_t d = get_u32(is);
    b.dims.push_back(static_cast<int>(d));
    numel *= d;
  }
  b.data.resize(numel);
  for (auto& f : b.data) f = get_f32(is);
  if (!is) throw std::runtime_error("checkpoint: truncated blob");
  return b;
}

inline void put_blob_list(std::ostream& os, const std::vector<ParamBlob>& v) {
  put_u32(os, static_cast<std::uint32_t>(v.size()));
  for (const auto& b : v) put_blob(os, b);
}

inline std::vector<ParamBlob> get_blob_list(std::istream& is) {
  std::vector<ParamBlob> out;
  const std::uint32_t n = get_u32(is);
  out.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) out.push_back(get_blob(is));
  return out;
}

constexpr char kCkptMagic[8] = {'C', 'R', 'N', 'C', 'K', 'P', 'T', '\0'};

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  os.write(detail::kCkptMagic, 8);
  detail::put_u32(os, ck.version);
  detail::put_u64(os, ck.config_text.size());
  os.write(ck.config_text.data(),
           static_cast<std::streamsize>(ck.config_text.size()));
  detail::put_u64(os, static_cast<std::uint64_t>(ck.iteration));
  detail::put_u64(os, ck.train_rng.state);
  detail::put_u64(os, ck.train_rng.inc);
  detail::put_u64(os, ck.eval_rng.state);
  detail::put_u64(os, ck.eval_rng.inc);
  detail::put_u64(os, static_cast<std::uint64_t>(ck.adam_t));
  detail::put_blob_list(os, ck.params);
  detail::put_blob_list(os, ck.adam_m);
  detail::put_blob_list(os, ck.adam_v);
  if (!os) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  char magic[8];
  is.read(magic, 8);
  if (!is || !std::equal(magic, magic + 8, detail::kCkptMagic)) {
    throw std::runtime_error("checkpoint: bad magic in '" + path + "'");
  }
  Checkpoint ck;
  ck.version = detail::get_u32(is);
  if (ck.version != 1) {
    throw std::runtime_error("checkpoint: unsupported version " +
                             std::to_string(ck.version));
  }
  const std::uint64_t clen = detail::get_u64(is);
  ck.config_text.resize(clen);
  is.read(ck.config_text.data(), static_cast<std::streamsize>(clen));
  ck.iteration = static_cast<std::int64_t>(detail::get_u64(is));
  ck.train_rng.state = detail::get_u64(is);
  ck.train_rng.inc = detail::get_u64(is);
  ck.eval_rng.state = detail::get_u64(is);
  ck.eval_rng.inc = detail::get_u64(is);
  ck.adam_t = static_cast<std::int64_t>(detail::get_u64(is));
  ck.params = detail::get_blob_list(is);
  ck.adam_m = detail::get_blob_list(is);
  ck.adam_v = detail::get_blob_list(is);
  if (!is) throw std::runtime_error("checkpoint: truncated file '" + path + "'");
  return ck;
}

}  // namespace crn
