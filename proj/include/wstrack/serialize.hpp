#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "wstrack/tensor.hpp"

namespace wstrack {

// Tensor blob: 16-byte header followed by the payload, everything
// little-endian regardless of host order.
//   bytes  0..3   magic "WST0"
//   bytes  4..7   u32 dtype code (1 = float64, 2 = float32)
//   bytes  8..15  4 x u16 dims (n, c, h, w)
// Dims are capped at 65535 by the header layout; every tensor shipped in a
// checkpoint is far below that.
namespace detail {

inline void store_u16le(uint8_t* p, uint16_t x) {
  p[0] = uint8_t(x & 0xff);
  p[1] = uint8_t(x >> 8);
}
inline void store_u32le(uint8_t* p, uint32_t x) {
  for (int i = 0; i < 4; ++i) p[i] = uint8_t((x >> (8 * i)) & 0xff);
}
inline void store_u64le(uint8_t* p, uint64_t x) {
  for (int i = 0; i < 8; ++i) p[i] = uint8_t((x >> (8 * i)) & 0xff);
}
inline uint16_t load_u16le(const uint8_t* p) { return uint16_t(p[0] | (uint16_t(p[1]) << 8)); }
inline uint32_t load_u32le(const uint8_t* p) {
  uint32_t x = 0;
  for (int i = 0; i < 4; ++i) x |= uint32_t(p[i]) << (8 * i);
  return x;
}
inline uint64_t load_u64le(const uint8_t* p) {
  uint64_t x = 0;
  for (int i = 0; i < 8; ++i) x |= uint64_t(p[i]) << (8 * i);
  return x;
}

inline uint64_t double_bits(double d) {
  uint64_t u;
  std::memcpy(&u, &d, 8);
  return u;
}
inline double bits_double(uint64_t u) {
  double d;
  std::memcpy(&d, &u, 8);
  return d;
}
inline uint32_t float_bits(float f) {
  uint32_t u;
  std::memcpy(&u, &f, 4);
  return u;
}
inline float bits_float(uint32_t u) {
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}

}  // namespace detail

enum class TensorDType : uint32_t { f64 = 1, f32 = 2 };

inline void write_tensor(std::ostream& os, const Tensor4& t,
                         TensorDType dtype = TensorDType::f64) {
  if (t.n > 0xffff || t.c > 0xffff || t.h > 0xffff || t.w > 0xffff)
    throw std::invalid_argument("write_tensor: dim exceeds u16 header field for " + t.shape_str());
  uint8_t hdr[16];
  hdr[0] = 'W'; hdr[1] = 'S'; hdr[2] = 'T'; hdr[3] = '0';
  detail::store_u32le(hdr + 4, uint32_t(dtype));
  detail::store_u16le(hdr + 8, uint16_t(t.n));
  detail::store_u16le(hdr + 10, uint16_t(t.c));
  detail::store_u16le(hdr + 12, uint16_t(t.h));
  detail::store_u16le(hdr + 14, uint16_t(t.w));
  os.write(reinterpret_cast<const char*>(hdr), 16);
  std::vector<uint8_t> buf;
  if (dtype == TensorDType::f64) {
    buf.resize(size_t(t.size()) * 8);
    for (int64_t i = 0; i < t.size(); ++i)
      detail::store_u64le(buf.data() + 8 * i, detail::double_bits(t.v[size_t(i)]));
  } else {
    buf.resize(size_t(t.size()) * 4);
    for (int64_t i = 0; i < t.size(); ++i)
      detail::store_u32le(buf.data() + 4 * i, detail::float_bits(float(t.v[size_t(i)])));
  }
  os.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size()));
  if (!os) throw std::runtime_error("write_tensor: stream write failed");
}

inline Tensor4 read_tensor(std::istream& is) {
  uint8_t hdr[16];
  is.read(reinterpret_cast<char*>(hdr), 16);
  if (!is) throw std::runtime_error("read_tensor: truncated header");
  if (hdr[0] != 'W' || hdr[1] != 'S' || hdr[2] != 'T' || hdr[3] != '0')
    throw std::runtime_error("read_tensor: bad magic");
  uint32_t dtype = detail::load_u32le(hdr + 4);
  if (dtype != 1 && dtype != 2) throw std::runtime_error("read_tensor: unknown dtype code");
  int n = detail::load_u16le(hdr + 8);
  int c = detail::load_u16le(hdr + 10);
  int h = detail::load_u16le(hdr + 12);
  int w = detail::load_u16le(hdr + 14);
  Tensor4 t(n, c, h, w);
  size_t elem = dtype == 1 ? 8 : 4;
  std::vector<uint8_t> buf(size_t(t.size()) * elem);
  is.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size()));
  if (!is) throw std::runtime_error("read_tensor: truncated payload");
  for (int64_t i = 0; i < t.size(); ++i) {
    t.v[size_t(i)] = dtype == 1 ? detail::bits_double(detail::load_u64le(buf.data() + 8 * i))
                                : double(detail::bits_float(detail::load_u32le(buf.data() + 4 * i)));
  }
  return t;
}

// Checkpoint container: "WSTCKPT1", u32 manifest length, manifest JSON
// (variant, seed, epoch, phase, param names + shapes), then one tensor
// blob per parameter in manifest order.
struct Checkpoint {
  std::string variant;
  uint64_t seed = 0;
  int epoch = 0;
  std::string phase;
  std::vector<std::pair<std::string, Tensor4>> params;

  const Tensor4* find(const std::string& name) const {
    for (const auto& [k, t] : params)
      if (k == name) return &t;
    return nullptr;
  }
};

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  nlohmann::ordered_json manifest;
  manifest["variant"] = ck.variant;
  manifest["seed"] = ck.seed;
  manifest["epoch"] = ck.epoch;
  manifest["phase"] = ck.phase;
  auto params = nlohmann::ordered_json::array();
  for (const auto& [name, t] : ck.params)
    params.push_back({{"name", name}, {"dims", {t.n, t.c, t.h, t.w}}});
  manifest["params"] = params;
  std::string mstr = manifest.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
  os.write("WSTCKPT1", 8);
  uint8_t len[4];
  detail::store_u32le(len, uint32_t(mstr.size()));
  os.write(reinterpret_cast<const char*>(len), 4);
  os.write(mstr.data(), std::streamsize(mstr.size()));
  for (const auto& [name, t] : ck.params) write_tensor(os, t);
  if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, "WSTCKPT1", 8) != 0)
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  uint8_t len[4];
  is.read(reinterpret_cast<char*>(len), 4);
  if (!is) throw std::runtime_error("load_checkpoint: truncated manifest length");
  std::string mstr(detail::load_u32le(len), '\0');
  is.read(mstr.data(), std::streamsize(mstr.size()));
  if (!is) throw std::runtime_error("load_checkpoint: truncated manifest");
  nlohmann::json manifest = nlohmann::json::parse(mstr);

  Checkpoint ck;
  ck.variant = manifest.at("variant").get<std::string>();
  ck.seed = manifest.at("seed").get<uint64_t>();
  ck.epoch = manifest.at("epoch").get<int>();
  ck.phase = manifest.value("phase", std::string());
  for (const auto& p : manifest.at("params")) {
    std::string name = p.at("name").get<std::string>();
    Tensor4 t = read_tensor(is);
    auto dims = p.at("dims");
    if (t.n != dims[0] || t.c != dims[1] || t.h != dims[2] || t.w != dims[3])
      throw std::runtime_error("load_checkpoint: blob/manifest shape mismatch for " + name);
    ck.params.emplace_back(std::move(name), std::move(t));
  }
  return ck;
}

}  // namespace wstrack
