#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "prf/errors.hpp"

// Little-endian binary file helpers with byte-offset tracking so format
// errors can name the offending position.

namespace prf::binio {

template <class T>
T byteswap_if_needed(T v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    T out;
    auto* src = reinterpret_cast<const unsigned char*>(&v);
    auto* dst = reinterpret_cast<unsigned char*>(&out);
    for (std::size_t i = 0; i < sizeof(T); ++i) dst[i] = src[sizeof(T) - 1 - i];
    return out;
  }
}

struct Writer {
  std::ostream& os;
  std::size_t offset = 0;

  void bytes(const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    offset += n;
  }
  void u32(std::uint32_t v) {
    v = byteswap_if_needed(v);
    bytes(&v, 4);
  }
  void u64(std::uint64_t v) {
    v = byteswap_if_needed(v);
    bytes(&v, 8);
  }
  void f32(float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    u32(bits);
  }
  void f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    u64(bits);
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
};

struct Reader {
  std::istream& is;
  std::size_t offset = 0;

  void bytes(void* p, std::size_t n, const char* what) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is.gcount()) != n)
      throw FormatError(std::string("truncated file while reading ") + what,
                        offset);
    offset += n;
  }
  std::uint32_t u32(const char* what) {
    std::uint32_t v;
    bytes(&v, 4, what);
    return byteswap_if_needed(v);
  }
  std::uint64_t u64(const char* what) {
    std::uint64_t v;
    bytes(&v, 8, what);
    return byteswap_if_needed(v);
  }
  float f32(const char* what) {
    const std::uint32_t bits = u32(what);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  double f64(const char* what) {
    const std::uint64_t bits = u64(what);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string str(std::size_t max_len, const char* what) {
    const std::size_t start = offset;
    const std::uint32_t n = u32(what);
    if (n > max_len)
      throw FormatError(std::string("implausible length for ") + what, start);
    std::string s(n, '\0');
    bytes(s.data(), n, what);
    return s;
  }
};

}  // namespace prf::binio
