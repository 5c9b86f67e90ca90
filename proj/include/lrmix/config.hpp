#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "lrmix/tensor.hpp"

namespace lrmix {

/// Canonical key-value text: one `key = value` per line, keys sorted, `#`
/// starts a comment, values may be wrapped in double quotes. The format is a
/// subset of TOML for flat tables.
class KeyValues {
 public:
  static KeyValues parse(std::string_view text, std::string_view origin = "<text>") {
    KeyValues kv;
    std::istringstream in{std::string(text)};
    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(in, raw)) {
      ++line_no;
      std::string_view line = raw;
      if (const auto hash = line.find('#'); hash != std::string_view::npos && !in_quotes(line, hash))
        line = line.substr(0, hash);
      line = trim(line);
      if (line.empty() || line.front() == '[') continue;  // TOML table headers carry no meaning here
      const auto where = std::string(origin) + ":" + std::to_string(line_no);
      const auto eq = line.find('=');
      if (eq == std::string_view::npos) throw ConfigError(where + ": expected `key = value`");
      std::string key(trim(line.substr(0, eq)));
      std::string_view value = trim(line.substr(eq + 1));
      if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
      if (key.empty()) throw ConfigError(where + ": empty key");
      kv.values_[key] = std::string(value);
    }
    return kv;
  }

  static KeyValues load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path);
  }

  std::string to_string() const {
    std::string out;
    for (const auto& [k, v] : values_) {
      const bool quote = v.empty() || v.find_first_of(" #=\t") != std::string::npos;
      out += k + " = " + (quote ? "\"" + v + "\"" : v) + "\n";
    }
    return out;
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  void set(const std::string& key, double value) {
    std::ostringstream os;
    os.precision(17);
    os << value;
    values_[key] = os.str();
  }
  void set(const std::string& key, std::int64_t value) { values_[key] = std::to_string(value); }
  void set(const std::string& key, int value) { values_[key] = std::to_string(value); }
  void set(const std::string& key, std::size_t value) { values_[key] = std::to_string(value); }
  void set(const std::string& key, bool value) { values_[key] = value ? "true" : "false"; }

  const std::map<std::string, std::string>& entries() const noexcept { return values_; }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }
  double get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      std::size_t used = 0;
      double v = std::stod(it->second, &used);
      if (used != it->second.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config key `" + key + "` is not a number: " + it->second);
    }
  }
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::int64_t v = 0;
    const auto& s = it->second;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size())
      throw ConfigError("config key `" + key + "` is not an integer: " + s);
    return v;
  }
  bool get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw ConfigError("config key `" + key + "` is not a boolean: " + it->second);
  }

  /// Keys present here but absent from `known`.
  template <class Range>
  std::vector<std::string> unknown_keys(const Range& known) const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_) {
      bool found = false;
      for (const auto& name : known) found = found || k == name;
      if (!found) out.push_back(k);
    }
    return out;
  }

 private:
  static std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
  }
  static bool in_quotes(std::string_view line, std::size_t pos) {
    bool q = false;
    for (std::size_t i = 0; i < pos; ++i)
      if (line[i] == '"') q = !q;
    return q;
  }

  std::map<std::string, std::string> values_;
};

}  // namespace lrmix
