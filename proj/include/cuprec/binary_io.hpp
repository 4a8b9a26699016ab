#pragma once

// Little-endian binary primitives shared by the checkpoint formats.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>

#include "cuprec/common.hpp"

namespace cuprec::binio {

static_assert(std::endian::native == std::endian::little, "big-endian hosts are not supported");

template <typename T>
void write(std::ostream& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read(std::istream& in) {
  static_assert(std::is_trivially_copyable_v<T>);
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) throw DataError("truncated file");
  return value;
}

inline void write_string(std::ostream& out, const std::string& s) {
  write<std::uint64_t>(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& in, std::uint64_t limit = 1u << 28) {
  auto n = read<std::uint64_t>(in);
  if (n > limit) throw DataError("corrupt string length");
  std::string s(n, '\0');
  if (n && !in.read(s.data(), static_cast<std::streamsize>(n))) throw DataError("truncated file");
  return s;
}

inline void write_magic(std::ostream& out, const std::array<char, 8>& magic, std::uint32_t version) {
  out.write(magic.data(), magic.size());
  write<std::uint32_t>(out, version);
}

inline void expect_magic(std::istream& in, const std::array<char, 8>& magic, std::uint32_t version,
                         const char* what) {
  std::array<char, 8> got{};
  if (!in.read(got.data(), got.size())) throw DataError(std::string("truncated ") + what);
  if (got != magic) throw DataError(std::string("not a ") + what + " file");
  auto v = read<std::uint32_t>(in);
  if (v != version)
    throw DataError(std::string(what) + " schema version " + std::to_string(v) +
                    " does not match expected " + std::to_string(version));
}

}  // namespace cuprec::binio
