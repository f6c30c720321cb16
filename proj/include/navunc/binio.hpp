// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>

#include "navunc/error.hpp"

// Little-endian primitives for the binary file formats.
namespace navunc::binio {

template <class U>
void put_uint(std::ostream& os, U v) {
  char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(buf, sizeof(U));
}

template <class U>
U get_uint(std::istream& is) {
  unsigned char buf[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(U))) throw DataError("binary input truncated");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
  return v;
}

inline void put_f64(std::ostream& os, double x) { put_uint<std::uint64_t>(os, std::bit_cast<std::uint64_t>(x)); }
inline double get_f64(std::istream& is) { return std::bit_cast<double>(get_uint<std::uint64_t>(is)); }

inline void put_string(std::ostream& os, const std::string& s) {
  put_uint<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is) {
  const auto n = get_uint<std::uint32_t>(is);
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw DataError("binary input truncated");
  return s;
}

inline void expect_magic(std::istream& is, const char (&magic)[5]) {
  char buf[4];
  if (!is.read(buf, 4) || std::string(buf, 4) != std::string(magic, 4))
    throw DataError(std::string("binary input: bad magic, expected ") + magic);
}

}  // namespace navunc::binio
