#pragma once

// Little-endian binary helpers shared by the file formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "latchkit/config.hpp"
#include "latchkit/error.hpp"

LATCHKIT_BEGIN_NAMESPACE
namespace binio {

static_assert(std::endian::native == std::endian::little, "big-endian hosts are not supported");

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw Error("unexpected end of file");
  return v;
}

inline void put_floats(std::ostream& os, std::span<const real> values) {
  std::vector<float> tmp(values.begin(), values.end());
  os.write(reinterpret_cast<const char*>(tmp.data()), static_cast<std::streamsize>(tmp.size() * sizeof(float)));
}

inline void get_floats(std::istream& is, std::span<real> out) {
  std::vector<float> tmp(out.size());
  is.read(reinterpret_cast<char*>(tmp.data()), static_cast<std::streamsize>(tmp.size() * sizeof(float)));
  if (!is) throw Error("unexpected end of file");
  std::copy(tmp.begin(), tmp.end(), out.begin());
}

inline void put_string(std::ostream& os, const std::string& s) {
  put<uint16_t>(os, static_cast<uint16_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is) {
  const auto n = get<uint16_t>(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw Error("unexpected end of file");
  return s;
}

inline void expect_magic(std::istream& is, const char (&magic)[5], const std::string& what) {
  char buf[4] = {};
  is.read(buf, 4);
  if (!is || std::memcmp(buf, magic, 4) != 0) throw Error(what + ": bad magic, expected " + magic);
}

}  // namespace binio
LATCHKIT_END_NAMESPACE
