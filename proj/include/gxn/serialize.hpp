#pragma once

#include "gxn/tensor.hpp"

#include <bit>
#include <cstring>
#include <istream>
#include <ostream>

namespace gxn {

// Tensor wire format: u64 rank, u64 dims..., then f64 values, all little-endian.

namespace detail {

template <typename T>
void write_le(std::ostream& os, T value) {
  static_assert(sizeof(T) == 8);
  unsigned char bytes[8];
  std::memcpy(bytes, &value, 8);
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + 8);
  os.write(reinterpret_cast<const char*>(bytes), 8);
}

template <typename T>
T read_le(std::istream& is) {
  static_assert(sizeof(T) == 8);
  unsigned char bytes[8];
  if (!is.read(reinterpret_cast<char*>(bytes), 8)) throw std::runtime_error("unexpected end of tensor stream");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + 8);
  T value;
  std::memcpy(&value, bytes, 8);
  return value;
}

}  // namespace detail

inline void write_u64(std::ostream& os, std::uint64_t v) { detail::write_le(os, v); }
inline std::uint64_t read_u64(std::istream& is) { return detail::read_le<std::uint64_t>(is); }

inline void write_string(std::ostream& os, const std::string& s) {
  write_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is, std::size_t limit = std::size_t{1} << 30) {
  const auto n = read_u64(is);
  if (n > limit) throw std::runtime_error("string block too large");
  std::string s(n, '\0');
  if (!is.read(s.data(), static_cast<std::streamsize>(n))) throw std::runtime_error("unexpected end of string block");
  return s;
}

template <typename S>
void write_tensor(std::ostream& os, const Shape& shape, const typename BasicTensor<S>::Vector& values) {
  write_u64(os, shape.size());
  for (auto d : shape) write_u64(os, d);
  for (Eigen::Index i = 0; i < values.size(); ++i) detail::write_le(os, static_cast<double>(values[i]));
}

template <typename S>
void write_tensor(std::ostream& os, const BasicTensor<S>& t) {
  write_tensor<S>(os, t.shape(), t.values());
}

/// Reads one tensor as an untracked constant.
inline Tensor read_tensor(std::istream& is) {
  const auto rank = read_u64(is);
  if (rank > 8) throw std::runtime_error("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = read_u64(is);
  const auto n = numel(shape);
  if (n > (std::size_t{1} << 32)) throw std::runtime_error("implausible tensor size");
  Tensor::Vector values(static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < values.size(); ++i) values[i] = detail::read_le<double>(is);
  return Tensor::constant(std::move(shape), std::move(values));
}

}  // namespace gxn
