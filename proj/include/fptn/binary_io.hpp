#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>

#include "fptn/errors.hpp"

// Explicit little-endian encoding for the on-disk formats, independent of
// host byte order.
namespace fptn::binary_io {

template <typename U>
void write_le(std::ostream& os, U value) {
  static_assert(std::is_unsigned_v<U>);
  unsigned char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<unsigned char>(value >> (8 * i));
  os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

inline void write_f64(std::ostream& os, double value) { write_le(os, std::bit_cast<std::uint64_t>(value)); }

template <typename U>
U read_le(std::istream& is) {
  static_assert(std::is_unsigned_v<U>);
  unsigned char buf[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(U))) throw IngestionError("unexpected end of binary stream");
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(buf[i]) << (8 * i);
  return value;
}

inline double read_f64(std::istream& is) { return std::bit_cast<double>(read_le<std::uint64_t>(is)); }

inline void write_bytes(std::ostream& os, const std::string& s) {
  write_le<std::uint64_t>(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_bytes(std::istream& is, std::uint64_t limit = 1u << 30) {
  const auto n = read_le<std::uint64_t>(is);
  if (n > limit) throw IngestionError("length-prefixed block is implausibly large");
  std::string s(n, '\0');
  if (n && !is.read(s.data(), static_cast<std::streamsize>(n))) throw IngestionError("truncated length-prefixed block");
  return s;
}

}  // namespace fptn::binary_io
