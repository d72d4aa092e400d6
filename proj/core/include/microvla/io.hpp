#pragma once

#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

namespace microvla {

std::string base64_encode(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> base64_decode(const std::string& text);

std::string hex_u64(std::uint64_t v);

// Length-prefixed binary stream with a running FNV checksum, used by the
// checkpoint format. Writer and reader must agree on the exact call sequence.
class BinaryWriter {
 public:
  explicit BinaryWriter(std::ostream& os) : os_(os) {}

  void u8(std::uint8_t v) { raw(&v, 1); }
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
  void f32(float v);
  void f64(double v);
  void str(const std::string& s);
  void f32_array(const std::vector<float>& v);
  void f64_array(const std::vector<double>& v);
  void i64_array(const std::vector<std::int64_t>& v);

  std::uint64_t checksum() const { return checksum_; }
  // Writes the checksum itself (not folded into the running value).
  void finish();

 private:
  void raw(const void* p, std::size_t n);
  std::ostream& os_;
  std::uint64_t checksum_ = 0xcbf29ce484222325ULL;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class BinaryReader {
 public:
  explicit BinaryReader(std::istream& is) : is_(is) {}

  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  float f32();
  double f64();
  std::string str();
  std::vector<float> f32_array();
  std::vector<double> f64_array();
  std::vector<std::int64_t> i64_array();

  std::uint64_t checksum() const { return checksum_; }
  // Reads and verifies the trailing checksum; throws CheckpointError.
  void finish();

 private:
  void raw(void* p, std::size_t n);
  std::istream& is_;
  std::uint64_t checksum_ = 0xcbf29ce484222325ULL;
};

}  // namespace microvla
