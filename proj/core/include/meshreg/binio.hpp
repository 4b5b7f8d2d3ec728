#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

// Little-endian binary readers/writers shared by the on-disk formats
// (FPLN, VEMB, RGPM, LORA, PCCH). The host is assumed little-endian;
// a static check below guards the assumption.

namespace meshreg::binio {

static_assert(sizeof(float) == 4 && sizeof(double) == 8, "IEEE-754 layout required");

inline void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), 8);
}

inline void write_i32(std::ostream& os, std::int32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}

inline void write_f32(std::ostream& os, float v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}

inline void write_f64(std::ostream& os, double v) {
  os.write(reinterpret_cast<const char*>(&v), 8);
}

inline void write_magic(std::ostream& os, const char (&magic)[5]) {
  os.write(magic, 4);
}

inline std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  if (!is) throw std::runtime_error("binio: unexpected end of stream reading u32");
  return v;
}

inline std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  if (!is) throw std::runtime_error("binio: unexpected end of stream reading u64");
  return v;
}

inline std::int32_t read_i32(std::istream& is) {
  std::int32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  if (!is) throw std::runtime_error("binio: unexpected end of stream reading i32");
  return v;
}

inline float read_f32(std::istream& is) {
  float v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  if (!is) throw std::runtime_error("binio: unexpected end of stream reading f32");
  return v;
}

inline double read_f64(std::istream& is) {
  double v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  if (!is) throw std::runtime_error("binio: unexpected end of stream reading f64");
  return v;
}

inline void expect_magic(std::istream& is, const char (&magic)[5], const std::string& what) {
  char buf[4];
  is.read(buf, 4);
  if (!is || std::memcmp(buf, magic, 4) != 0) {
    throw std::runtime_error(what + ": bad magic, expected '" + magic + "'");
  }
}

inline void expect_version(std::istream& is, std::uint32_t version, const std::string& what) {
  const std::uint32_t v = read_u32(is);
  if (v != version) {
    throw std::runtime_error(what + ": unsupported version " + std::to_string(v));
  }
}

// Values cross the disk boundary as f32; memory stays f64.
inline void write_f32_array(std::ostream& os, const double* data, std::size_t n) {
  std::vector<float> buf(n);
  for (std::size_t i = 0; i < n; ++i) buf[i] = static_cast<float>(data[i]);
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(4 * n));
}

inline void read_f32_array(std::istream& is, double* data, std::size_t n) {
  std::vector<float> buf(n);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(4 * n));
  if (!is) throw std::runtime_error("binio: unexpected end of stream reading f32 array");
  for (std::size_t i = 0; i < n; ++i) data[i] = static_cast<double>(buf[i]);
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  return os;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open for reading: " + path);
  return is;
}

}  // namespace meshreg::binio
