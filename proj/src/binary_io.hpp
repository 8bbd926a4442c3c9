// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "dynaroute/errors.hpp"

namespace dynaroute::detail {

static_assert(std::endian::native == std::endian::little,
              "file formats are written with native little-endian stores");

template <typename U>
void write_le(std::ostream& os, U value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(U));
}

template <typename U>
U read_le(std::istream& is, const std::string& what) {
  U value{};
  if (!is.read(reinterpret_cast<char*>(&value), sizeof(U))) {
    throw DataError(DataError::Kind::kTruncated, "truncated while reading " + what);
  }
  return value;
}

inline void read_bytes(std::istream& is, char* dst, std::size_t n, const std::string& what) {
  if (!is.read(dst, static_cast<std::streamsize>(n)) ||
      static_cast<std::size_t>(is.gcount()) != n) {
    throw DataError(DataError::Kind::kTruncated, "truncated while reading " + what);
  }
}

}  // namespace dynaroute::detail
