#pragma once

// Little-endian fixed-width I/O shared by the checkpoint formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "qkt/error.hpp"

namespace qkt::io {

static_assert(std::endian::native == std::endian::little, "binary I/O assumes a little-endian host");

template <class T>
void put(std::ostream& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.write(buf, sizeof(T));
}

template <class T>
T take(std::istream& in, const char* what) {
  char buf[sizeof(T)];
  if (!in.read(buf, sizeof(T))) throw DataError(std::string("checkpoint truncated while reading ") + what);
  T value;
  std::memcpy(&value, buf, sizeof(T));
  return value;
}

inline std::string take_string(std::istream& in, std::uint64_t size, const char* what) {
  if (size > (std::uint64_t{1} << 30)) throw DataError(std::string("checkpoint: implausible length for ") + what);
  std::string s(size, '\0');
  if (size > 0 && !in.read(s.data(), static_cast<std::streamsize>(size))) {
    throw DataError(std::string("checkpoint truncated while reading ") + what);
  }
  return s;
}

}  // namespace qkt::io
