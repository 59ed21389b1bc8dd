#pragma once

// TNSR binary format:
//   "TNSR" | version u8 (0x01) | dtype u8 (0x00 f32, 0x01 u8) | rank u8
//   | rank x u32 LE dimension | row-major LE payload

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>

#include "segxfer/tensor.hpp"

namespace segxfer {

inline constexpr std::array<char, 4> kTensorMagic{'T', 'N', 'S', 'R'};
inline constexpr std::uint8_t kTensorVersion = 0x01;

enum class DType : std::uint8_t { f32 = 0x00, u8 = 0x01 };

namespace detail {

inline void write_u8(std::ostream& os, std::uint8_t v) { os.put(static_cast<char>(v)); }

inline void write_u32(std::ostream& os, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                         static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(bytes, 4);
}

inline std::uint8_t read_u8(std::istream& is) {
  const int c = is.get();
  if (c == std::char_traits<char>::eof()) throw IoError("unexpected end of stream");
  return static_cast<std::uint8_t>(c);
}

inline std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw IoError("unexpected end of stream");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

template <typename T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::f32;
  else if constexpr (std::is_same_v<T, std::uint8_t>) return DType::u8;
  else static_assert(sizeof(T) == 0, "TNSR stores only float32 and uint8");
}

inline void write_header(std::ostream& os, DType dtype, const Shape& shape) {
  if (shape.size() > 255) throw ShapeError("tensor rank exceeds 255");
  os.write(kTensorMagic.data(), 4);
  write_u8(os, kTensorVersion);
  write_u8(os, static_cast<std::uint8_t>(dtype));
  write_u8(os, static_cast<std::uint8_t>(shape.size()));
  for (auto d : shape) {
    if (d > UINT32_MAX) throw ShapeError("dimension exceeds u32 range");
    write_u32(os, static_cast<std::uint32_t>(d));
  }
}

}  // namespace detail

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  detail::write_header(os, detail::dtype_of<T>(), t.shape());
  if constexpr (std::is_same_v<T, float>) {
    for (float v : t.data()) detail::write_u32(os, std::bit_cast<std::uint32_t>(v));
  } else {
    os.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.size()));
  }
  if (!os) throw IoError("failed writing tensor");
}

template <typename T>
Tensor<T> read_tensor(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4) || magic != kTensorMagic) throw IoError("bad TNSR magic");
  if (detail::read_u8(is) != kTensorVersion) throw IoError("unsupported TNSR version");
  const auto dtype = static_cast<DType>(detail::read_u8(is));
  if (dtype != detail::dtype_of<T>()) throw IoError("TNSR dtype mismatch");
  const std::size_t rank = detail::read_u8(is);
  if (rank == 0) throw IoError("TNSR rank 0");
  Shape shape(rank);
  for (auto& d : shape) {
    d = detail::read_u32(is);
    if (d == 0) throw IoError("TNSR zero dimension");
  }
  std::vector<T> data(shape_size(shape));
  if constexpr (std::is_same_v<T, float>) {
    for (auto& v : data) v = std::bit_cast<float>(detail::read_u32(is));
  } else {
    if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size()))) {
      throw IoError("truncated TNSR payload");
    }
  }
  return Tensor<T>(std::move(shape), std::move(data));
}

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
}

template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_tensor<T>(is);
}

}  // namespace segxfer
