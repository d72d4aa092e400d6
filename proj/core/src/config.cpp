#include "microvla/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "microvla/rng.hpp"

namespace microvla {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

KeyValue KeyValue::parse_text(const std::string& text) {
  KeyValue kv;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + " has no '=': " + line);
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      throw ConfigError("config line " + std::to_string(lineno) + " has empty key");
    }
    kv.values_[key] = value;
  }
  return kv;
}

KeyValue KeyValue::parse_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file '" + path + "'");
  std::ostringstream os;
  os << f.rdbuf();
  return parse_text(os.str());
}

void KeyValue::set_f64(const std::string& key, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  set(key, buf);
}

std::string KeyValue::get_str(const std::string& key, const std::string& fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

std::int64_t KeyValue::get_i64(const std::string& key, std::int64_t fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    return std::stoll(it->second);
  } catch (...) {
    throw ConfigError("key '" + key + "' is not an integer: " + it->second);
  }
}

std::uint64_t KeyValue::get_u64(const std::string& key, std::uint64_t fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    return std::stoull(it->second);
  } catch (...) {
    throw ConfigError("key '" + key + "' is not an unsigned integer: " + it->second);
  }
}

double KeyValue::get_f64(const std::string& key, double fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    return std::stod(it->second);
  } catch (...) {
    throw ConfigError("key '" + key + "' is not a number: " + it->second);
  }
}

bool KeyValue::get_bool(const std::string& key, bool fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  if (it->second == "true" || it->second == "1") return true;
  if (it->second == "false" || it->second == "0") return false;
  throw ConfigError("key '" + key + "' is not a boolean: " + it->second);
}

void KeyValue::apply_override(const std::string& assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override must be key=value, got '" + assignment + "'");
  }
  values_[trim(assignment.substr(0, eq))] = trim(assignment.substr(eq + 1));
}

void KeyValue::merge(const KeyValue& other) {
  for (const auto& [k, v] : other.values_) values_[k] = v;
}

std::string KeyValue::canonical_text() const {
  std::ostringstream os;
  for (const auto& [k, v] : values_) os << k << " = " << v << "\n";
  return os.str();
}

std::uint64_t KeyValue::hash() const { return fnv1a(canonical_text()); }

void KeyValue::save(const std::string& path) const {
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot write config file '" + path + "'");
  f << canonical_text();
}

}  // namespace microvla
