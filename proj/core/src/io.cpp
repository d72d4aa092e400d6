#include "microvla/io.hpp"

#include <array>
#include <sstream>

#include "microvla/rng.hpp"

namespace microvla {

namespace {
constexpr char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  while (i + 3 <= bytes.size()) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += kB64[(v >> 6) & 63];
    out += kB64[v & 63];
    i += 3;
  }
  const std::size_t rem = bytes.size() - i;
  if (rem == 1) {
    const std::uint32_t v = bytes[i] << 16;
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += "==";
  } else if (rem == 2) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8);
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += kB64[(v >> 6) & 63];
    out += '=';
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  std::array<std::int8_t, 256> lut;
  lut.fill(-1);
  for (int i = 0; i < 64; ++i) lut[static_cast<std::size_t>(kB64[i])] = static_cast<std::int8_t>(i);
  std::vector<std::uint8_t> out;
  out.reserve(text.size() / 4 * 3);
  std::uint32_t acc = 0;
  int bits = 0;
  for (char c : text) {
    if (c == '=') break;
    const std::int8_t v = lut[static_cast<std::uint8_t>(c)];
    if (v < 0) throw std::runtime_error("base64: invalid character");
    acc = (acc << 6) | static_cast<std::uint32_t>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<std::uint8_t>((acc >> bits) & 0xff));
    }
  }
  return out;
}

std::string hex_u64(std::uint64_t v) {
  static const char* d = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = d[v & 0xf];
    v >>= 4;
  }
  return s;
}

void BinaryWriter::raw(const void* p, std::size_t n) {
  os_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  checksum_ = fnv1a(p, n, checksum_);
}

void BinaryWriter::u32(std::uint32_t v) { raw(&v, sizeof v); }
void BinaryWriter::u64(std::uint64_t v) { raw(&v, sizeof v); }
void BinaryWriter::f32(float v) { raw(&v, sizeof v); }
void BinaryWriter::f64(double v) { raw(&v, sizeof v); }

void BinaryWriter::str(const std::string& s) {
  u64(s.size());
  raw(s.data(), s.size());
}

void BinaryWriter::f32_array(const std::vector<float>& v) {
  u64(v.size());
  raw(v.data(), v.size() * sizeof(float));
}

void BinaryWriter::f64_array(const std::vector<double>& v) {
  u64(v.size());
  raw(v.data(), v.size() * sizeof(double));
}

void BinaryWriter::i64_array(const std::vector<std::int64_t>& v) {
  u64(v.size());
  raw(v.data(), v.size() * sizeof(std::int64_t));
}

void BinaryWriter::finish() {
  const std::uint64_t sum = checksum_;
  os_.write(reinterpret_cast<const char*>(&sum), sizeof sum);
}

void BinaryReader::raw(void* p, std::size_t n) {
  is_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (!is_) throw CheckpointError("truncated stream");
  checksum_ = fnv1a(p, n, checksum_);
}

std::uint8_t BinaryReader::u8() {
  std::uint8_t v;
  raw(&v, 1);
  return v;
}

std::uint32_t BinaryReader::u32() {
  std::uint32_t v;
  raw(&v, sizeof v);
  return v;
}

std::uint64_t BinaryReader::u64() {
  std::uint64_t v;
  raw(&v, sizeof v);
  return v;
}

float BinaryReader::f32() {
  float v;
  raw(&v, sizeof v);
  return v;
}

double BinaryReader::f64() {
  double v;
  raw(&v, sizeof v);
  return v;
}

std::string BinaryReader::str() {
  const std::uint64_t n = u64();
  std::string s(n, '\0');
  if (n) raw(s.data(), n);
  return s;
}

std::vector<float> BinaryReader::f32_array() {
  const std::uint64_t n = u64();
  std::vector<float> v(n);
  if (n) raw(v.data(), n * sizeof(float));
  return v;
}

std::vector<double> BinaryReader::f64_array() {
  const std::uint64_t n = u64();
  std::vector<double> v(n);
  if (n) raw(v.data(), n * sizeof(double));
  return v;
}

std::vector<std::int64_t> BinaryReader::i64_array() {
  const std::uint64_t n = u64();
  std::vector<std::int64_t> v(n);
  if (n) raw(v.data(), n * sizeof(std::int64_t));
  return v;
}

void BinaryReader::finish() {
  const std::uint64_t expect = checksum_;
  std::uint64_t got;
  is_.read(reinterpret_cast<char*>(&got), sizeof got);
  if (!is_ || got != expect) {
    throw CheckpointError("checksum mismatch: file is corrupt or truncated");
  }
}

}  // namespace microvla
