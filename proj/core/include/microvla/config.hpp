#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace microvla {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Flat key=value configuration. Files are plain text, one `key = value` per
// line, '#' comments. CLI --override key=value entries take precedence.
class KeyValue {
 public:
  KeyValue() = default;

  static KeyValue parse_text(const std::string& text);
  static KeyValue parse_file(const std::string& path);

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  void set_i64(const std::string& key, std::int64_t v) { set(key, std::to_string(v)); }
  void set_u64(const std::string& key, std::uint64_t v) { set(key, std::to_string(v)); }
  void set_f64(const std::string& key, double v);
  void set_bool(const std::string& key, bool v) { set(key, v ? "true" : "false"); }

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  const std::map<std::string, std::string>& entries() const { return values_; }

  std::string get_str(const std::string& key, const std::string& fallback) const;
  std::int64_t get_i64(const std::string& key, std::int64_t fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  double get_f64(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  // "key=value"; throws ConfigError on malformed input.
  void apply_override(const std::string& assignment);
  void merge(const KeyValue& other);

  // Sorted `key = value` lines; the canonical form used for hashing.
  std::string canonical_text() const;
  std::uint64_t hash() const;
  void save(const std::string& path) const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace microvla
