#pragma once

#include "gazeloss/tensor.hpp"

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace gazeloss {

// GZT1 tensor file: magic "GZT1", u32 little-endian rank, rank x u32 dims,
// then the row-major float32 little-endian payload.

namespace detail {

inline void put_u32_le(std::string& out, uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline uint32_t get_u32_le(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

}  // namespace detail

template <typename S>
std::string encode_gzt(const Shape& shape, const S* data) {
  std::string out;
  const int64_t n = shape_numel(shape);
  out.reserve(8 + 4 * shape.size() + 4 * static_cast<size_t>(n));
  out += "GZT1";
  detail::put_u32_le(out, static_cast<uint32_t>(shape.size()));
  for (int d : shape) detail::put_u32_le(out, static_cast<uint32_t>(d));
  for (int64_t i = 0; i < n; ++i) {
    const float f = static_cast<float>(data[i]);
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    detail::put_u32_le(out, bits);
  }
  return out;
}

template <typename S>
void write_gzt(const std::string& path, const Shape& shape, const S* data) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path + " for writing");
  const std::string bytes = encode_gzt(shape, data);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write failed for " + path);
}

template <typename S>
void write_gzt(const std::string& path, const Tensor<S>& t) {
  write_gzt(path, t.shape(), t.data());
}

template <typename S>
Tensor<S> decode_gzt(const unsigned char* bytes, size_t len, const std::string& origin) {
  if (len < 8 || std::memcmp(bytes, "GZT1", 4) != 0)
    throw FormatError(origin + ": not a GZT1 tensor file");
  const uint32_t rank = detail::get_u32_le(bytes + 4);
  if (rank > 8) throw FormatError(origin + ": implausible rank " + std::to_string(rank));
  if (len < 8 + 4 * static_cast<size_t>(rank))
    throw FormatError(origin + ": truncated dimension table");
  Shape shape;
  int64_t n = 1;
  for (uint32_t i = 0; i < rank; ++i) {
    const uint32_t d = detail::get_u32_le(bytes + 8 + 4 * i);
    if (d == 0) throw FormatError(origin + ": zero dimension at axis " + std::to_string(i));
    shape.push_back(static_cast<int>(d));
    n *= d;
  }
  const size_t expect = 8 + 4 * static_cast<size_t>(rank) + 4 * static_cast<size_t>(n);
  if (len != expect)
    throw FormatError(origin + ": payload size " + std::to_string(len) + " != expected " +
                      std::to_string(expect));
  Tensor<S> t = Tensor<S>::zeros(shape);
  const unsigned char* p = bytes + 8 + 4 * rank;
  S* dst = t.data();
  for (int64_t i = 0; i < n; ++i, p += 4) {
    uint32_t bits = detail::get_u32_le(p);
    float f;
    std::memcpy(&f, &bits, 4);
    dst[i] = static_cast<S>(f);
  }
  return t;
}

template <typename S>
Tensor<S> read_gzt(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_gzt<S>(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size(), path);
}

}  // namespace gazeloss
