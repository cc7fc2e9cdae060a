#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>

#include "fundus/io.hpp"

namespace fundus {

// Flat `key = value` configuration with dotted keys. Blank lines and lines
// starting with '#' are ignored.
class KeyValueConfig {
 public:
  KeyValueConfig() = default;

  static KeyValueConfig parse(const std::string& text, const std::string& name = "<config>") {
    KeyValueConfig cfg;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
      auto end = text.find('\n', pos);
      if (end == std::string::npos) end = text.size();
      ++line_no;
      const auto line = trim(std::string_view(text).substr(pos, end - pos));
      pos = end + 1;
      if (line.empty() || line.front() == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string_view::npos) throw data_error_at(name, line_no, "expected 'key = value'");
      const std::string key(trim(line.substr(0, eq)));
      const std::string value(trim(line.substr(eq + 1)));
      if (key.empty()) throw data_error_at(name, line_no, "empty key");
      cfg.values_[key] = value;
    }
    return cfg;
  }

  static KeyValueConfig load(const fs::path& path) { return parse(read_file(path), path.string()); }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  std::string get(const std::string& key, const std::string& fallback) const {
    read_.insert(key);
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  double get(const std::string& key, double fallback) const {
    const auto s = get(key, std::string());
    if (s.empty()) return fallback;
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != s.size()) throw UsageError("config key '" + key + "' expects a number, got '" + s + "'");
    return v;
  }

  std::int64_t get(const std::string& key, std::int64_t fallback) const {
    const auto s = get(key, std::string());
    if (s.empty()) return fallback;
    std::size_t used = 0;
    long long v = 0;
    try {
      v = std::stoll(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != s.size()) throw UsageError("config key '" + key + "' expects an integer, got '" + s + "'");
    return v;
  }

  int get(const std::string& key, int fallback) const {
    return static_cast<int>(get(key, static_cast<std::int64_t>(fallback)));
  }

  bool get(const std::string& key, bool fallback) const {
    const auto s = get(key, std::string());
    if (s.empty()) return fallback;
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw UsageError("config key '" + key + "' expects a boolean, got '" + s + "'");
  }

  // Keys present in the file that no getter asked for (typos, stale keys).
  std::set<std::string> unused_keys() const {
    std::set<std::string> out;
    for (const auto& [k, v] : values_)
      if (!read_.count(k)) out.insert(k);
    return out;
  }

  const std::map<std::string, std::string>& values() const { return values_; }

  std::string render() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

 private:
  std::map<std::string, std::string> values_;
  mutable std::set<std::string> read_;
};

}  // namespace fundus
