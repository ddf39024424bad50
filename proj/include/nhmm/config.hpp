#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace nhmm {

/// Flat `key = value` text with `#` comments. Every key must be consumed by
/// a getter before `finish()`, which rejects leftovers as unknown keys.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::istream& is, std::string source = "config") {
    KeyValueConfig cfg;
    cfg.source_ = std::move(source);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const auto text = trim(line);
      if (text.empty()) continue;
      const auto eq = text.find('=');
      if (eq == std::string_view::npos)
        throw std::runtime_error(cfg.source_ + ":" + std::to_string(lineno) + ": expected key = value");
      const std::string key(trim(text.substr(0, eq)));
      const std::string value(trim(text.substr(eq + 1)));
      if (key.empty())
        throw std::runtime_error(cfg.source_ + ":" + std::to_string(lineno) + ": empty key");
      if (!cfg.values_.emplace(key, value).second)
        throw std::runtime_error(cfg.source_ + ": duplicate key '" + key + "'");
    }
    return cfg;
  }

  static KeyValueConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file '" + path + "'");
    return parse(in, path);
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  std::string get_string(const std::string& key, const std::string& fallback) {
    used_.insert(key);
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  std::string require_string(const std::string& key) {
    if (!has(key)) throw std::runtime_error(source_ + ": missing key '" + key + "'");
    return get_string(key, {});
  }

  double get_double(const std::string& key, double fallback) {
    if (!has(key)) return used_.insert(key), fallback;
    return to_double(key, get_string(key, {}));
  }

  std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) {
    if (!has(key)) return used_.insert(key), fallback;
    return to_uint(key, get_string(key, {}));
  }

  /// Whitespace- or comma-separated list of unsigned integers.
  std::vector<std::size_t> get_uint_list(const std::string& key, std::vector<std::size_t> fallback) {
    if (!has(key)) return used_.insert(key), fallback;
    std::vector<std::size_t> out;
    for (const auto& tok : split_list(get_string(key, {}))) out.push_back(to_uint(key, tok));
    return out;
  }

  std::vector<std::string> get_list(const std::string& key, std::vector<std::string> fallback) {
    if (!has(key)) return used_.insert(key), fallback;
    return split_list(get_string(key, {}));
  }

  /// Keys starting with `prefix` that have not been consumed yet.
  std::vector<std::string> keys_with_prefix(std::string_view prefix) const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_)
      if (k.rfind(prefix, 0) == 0) out.push_back(k);
    return out;
  }

  void finish() const {
    for (const auto& [k, v] : values_)
      if (!used_.count(k)) throw std::runtime_error(source_ + ": unknown key '" + k + "'");
  }

  static std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
      if (c == ',' || c == ' ' || c == '\t') {
        if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
      } else {
        cur.push_back(c);
      }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
  }

 private:
  static std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  double to_double(const std::string& key, const std::string& v) const {
    std::istringstream ss(v);
    double d = 0.0;
    if (!(ss >> d) || !(ss >> std::ws).eof())
      throw std::runtime_error(source_ + ": key '" + key + "' expects a number, got '" + v + "'");
    return d;
  }

  std::uint64_t to_uint(const std::string& key, const std::string& v) const {
    std::uint64_t x = 0;
    const auto* end = v.data() + v.size();
    auto [p, ec] = std::from_chars(v.data(), end, x);
    if (ec != std::errc{} || p != end)
      throw std::runtime_error(source_ + ": key '" + key + "' expects an unsigned integer, got '" +
                               v + "'");
    return x;
  }

  std::string source_;
  std::map<std::string, std::string> values_;
  std::set<std::string> used_;
};

}  // namespace nhmm
