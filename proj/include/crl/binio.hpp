#pragma once

// Little-endian binary helpers shared by every binary file format.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "crl/errors.hpp"

namespace crl::binio {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

inline void write_magic(std::ostream& os, const char (&magic)[5]) { os.write(magic, 4); }

inline void expect_magic(std::istream& is, const char (&magic)[5], const std::string& what) {
  std::array<char, 4> got{};
  is.read(got.data(), 4);
  if (!is || std::memcmp(got.data(), magic, 4) != 0) {
    fail(ErrorKind::kIo, what + ": bad magic bytes (expected " + std::string(magic, 4) + ")");
  }
}

template <typename T>
void write_pod(std::ostream& os, T value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const std::string& what) {
  T value{};
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!is) fail(ErrorKind::kIo, what + ": truncated file");
  return value;
}

inline void write_f64s(std::ostream& os, std::span<const double> values) {
  os.write(reinterpret_cast<const char*>(values.data()),
           static_cast<std::streamsize>(values.size() * sizeof(double)));
}

inline void read_f64s(std::istream& is, std::span<double> out, const std::string& what) {
  is.read(reinterpret_cast<char*>(out.data()),
          static_cast<std::streamsize>(out.size() * sizeof(double)));
  if (!is) fail(ErrorKind::kIo, what + ": truncated tensor data");
}

}  // namespace crl::binio
