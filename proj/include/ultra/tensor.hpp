#pragma once

// Float32 N-d tensors and the `.ten` container.
//
// Layout (little-endian):
//   "ULTT" | u32 version = 1 | u8 dtype = 1 (float32) | u8 ndim | 2 zero bytes
//   | ndim x u64 dims | row-major float32 payload

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <numeric>
#include <string>
#include <vector>

#include "ultra/error.hpp"

namespace ultra {

using Shape = std::vector<std::uint64_t>;

inline std::uint64_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::uint64_t{1},
                         std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

struct Tensor {
  Shape shape;
  std::vector<float> data;

  Tensor() = default;
  explicit Tensor(Shape s, float fill = 0.0f)
      : shape(std::move(s)), data(element_count(shape), fill) {}
  Tensor(Shape s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {}

  std::size_t ndim() const noexcept { return shape.size(); }

  /// Flat offset of a multi-index; no bounds checks.
  template <typename... Idx>
  std::size_t offset(Idx... idx) const {
    const std::size_t index[] = {static_cast<std::size_t>(idx)...};
    std::size_t off = 0;
    for (std::size_t d = 0; d < sizeof...(Idx); ++d) off = off * shape[d] + index[d];
    return off;
  }

  template <typename... Idx>
  float& at(Idx... idx) { return data[offset(idx...)]; }
  template <typename... Idx>
  float at(Idx... idx) const { return data[offset(idx...)]; }

  /// Bitwise equality of shape and payload.
  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape == b.shape && a.data.size() == b.data.size() &&
           (a.data.empty() ||
            std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0);
  }
};

namespace detail {

inline constexpr char kTensorMagic[4] = {'U', 'L', 'T', 'T'};
inline constexpr std::uint32_t kTensorVersion = 1;
inline constexpr std::uint8_t kDtypeFloat32 = 1;

inline void put_le(std::vector<unsigned char>& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

inline std::uint64_t get_le(const unsigned char* p, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::error_code ec;
  if (!std::filesystem::is_regular_file(path, ec))
    fail(ErrorKind::missing_file, "file not found", path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open for reading", path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path,
                             const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot open for writing", path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::io, "write failed", path.string());
}

}  // namespace detail

inline std::vector<unsigned char> encode_tensor(const Tensor& t) {
  if (t.shape.size() > 255) fail(ErrorKind::invalid_argument, "too many dimensions");
  if (element_count(t.shape) != t.data.size())
    fail(ErrorKind::shape_mismatch, "payload does not match shape " + shape_string(t.shape));
  std::vector<unsigned char> out;
  out.reserve(12 + 8 * t.shape.size() + 4 * t.data.size());
  out.insert(out.end(), std::begin(detail::kTensorMagic), std::end(detail::kTensorMagic));
  detail::put_le(out, detail::kTensorVersion, 4);
  out.push_back(detail::kDtypeFloat32);
  out.push_back(static_cast<unsigned char>(t.shape.size()));
  out.push_back(0);
  out.push_back(0);
  for (auto d : t.shape) detail::put_le(out, d, 8);
  for (float f : t.data) detail::put_le(out, std::bit_cast<std::uint32_t>(f), 4);
  return out;
}

/// Decodes a `.ten` byte image. `name` is only used to label errors.
inline Tensor decode_tensor(const std::vector<unsigned char>& bytes,
                            const std::string& name = {}) {
  constexpr std::size_t kHeader = 12;
  if (bytes.size() < kHeader) fail(ErrorKind::shape_mismatch, "truncated header", name);
  if (std::memcmp(bytes.data(), detail::kTensorMagic, 4) != 0)
    fail(ErrorKind::bad_magic, "expected magic ULTT", name);
  const auto version = detail::get_le(bytes.data() + 4, 4);
  if (version != detail::kTensorVersion)
    fail(ErrorKind::version_mismatch, "unsupported version " + std::to_string(version), name);
  if (bytes[8] != detail::kDtypeFloat32)
    fail(ErrorKind::bad_dtype, "unsupported dtype " + std::to_string(bytes[8]), name);
  if (bytes[10] != 0 || bytes[11] != 0)
    fail(ErrorKind::invalid_manifest, "reserved header bytes are not zero", name);
  const std::size_t ndim = bytes[9];
  if (bytes.size() < kHeader + 8 * ndim)
    fail(ErrorKind::shape_mismatch, "truncated dimension list", name);

  Shape shape(ndim);
  std::uint64_t count = 1;
  for (std::size_t d = 0; d < ndim; ++d) {
    shape[d] = detail::get_le(bytes.data() + kHeader + 8 * d, 8);
    if (shape[d] != 0 && count > (UINT64_MAX / 4) / shape[d])
      fail(ErrorKind::shape_mismatch, "dimensions overflow", name);
    count *= shape[d];
  }
  const std::size_t payload_at = kHeader + 8 * ndim;
  if (bytes.size() - payload_at != count * 4)
    fail(ErrorKind::shape_mismatch,
         "payload has " + std::to_string(bytes.size() - payload_at) +
             " bytes but header shape " + shape_string(shape) + " needs " +
             std::to_string(count) + " floats",
         name);

  std::vector<float> data(count);
  for (std::size_t i = 0; i < count; ++i) {
    data[i] = std::bit_cast<float>(
        static_cast<std::uint32_t>(detail::get_le(bytes.data() + payload_at + 4 * i, 4)));
    if (!std::isfinite(data[i]))
      fail(ErrorKind::nan_payload, "non-finite value at element " + std::to_string(i), name);
  }
  return Tensor(std::move(shape), std::move(data));
}

inline void write_tensor(const std::filesystem::path& path, const Tensor& t) {
  detail::write_file_bytes(path, encode_tensor(t));
}

inline Tensor read_tensor(const std::filesystem::path& path) {
  return decode_tensor(detail::read_file_bytes(path), path.string());
}

}  // namespace ultra
