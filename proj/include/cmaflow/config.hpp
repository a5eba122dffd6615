#pragma once

#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cmaflow/errors.hpp"

namespace cmaf {

/// Parsed key-value configuration with [section] grouping. Lines are
///   [section]
///   key = value        # trailing comments allowed
/// Blank lines and lines starting with '#' or ';' are ignored. Keys remember
/// the line they came from so diagnostics can point at the source.
class Config {
 public:
  struct Entry {
    std::string value;
    int line = 0;
    mutable bool consumed = false;
  };

  static Config parse_string(const std::string& text, const std::string& origin = "<string>") {
    Config cfg;
    cfg.origin_ = origin;
    std::istringstream in(text);
    std::string line;
    std::string section;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const std::string s = strip(strip_comment(line));
      if (s.empty()) continue;
      if (s.front() == '[') {
        if (s.back() != ']')
          throw ConfigError(origin + ":" + std::to_string(lineno) +
                            ": unterminated section header '" + s + "'");
        section = strip(s.substr(1, s.size() - 2));
        if (section.empty())
          throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty section name");
        cfg.sections_[section];  // record even if empty
        continue;
      }
      const auto eq = s.find('=');
      if (eq == std::string::npos)
        throw ConfigError(origin + ":" + std::to_string(lineno) +
                          ": expected 'key = value', got '" + s + "'");
      const std::string key = strip(s.substr(0, eq));
      const std::string value = strip(s.substr(eq + 1));
      if (key.empty())
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
      if (section.empty())
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": key '" + key +
                          "' appears before any [section]");
      auto& slot = cfg.sections_[section][key];
      slot.value = value;
      slot.line = lineno;
    }
    return cfg;
  }

  static Config parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_string(text, path);
  }

  bool has_section(const std::string& s) const { return sections_.count(s) > 0; }
  bool has(const std::string& s, const std::string& k) const {
    const auto it = sections_.find(s);
    return it != sections_.end() && it->second.count(k) > 0;
  }

  std::string get_string(const std::string& s, const std::string& k) const {
    const Entry& e = require(s, k);
    e.consumed = true;
    return e.value;
  }
  std::string get_string(const std::string& s, const std::string& k,
                         const std::string& fallback) const {
    return has(s, k) ? get_string(s, k) : fallback;
  }

  double get_double(const std::string& s, const std::string& k) const {
    const Entry& e = require(s, k);
    e.consumed = true;
    try {
      std::size_t used = 0;
      const double v = std::stod(e.value, &used);
      if (used != e.value.size()) throw std::invalid_argument("trailing characters");
      return v;
    } catch (const std::exception&) {
      throw ConfigError(origin_ + ":" + std::to_string(e.line) + ": field [" + s + "] " + k +
                        " = '" + e.value + "' is not a number");
    }
  }
  double get_double(const std::string& s, const std::string& k, double fallback) const {
    return has(s, k) ? get_double(s, k) : fallback;
  }

  long get_int(const std::string& s, const std::string& k) const {
    const Entry& e = require(s, k);
    e.consumed = true;
    try {
      std::size_t used = 0;
      const long v = std::stol(e.value, &used);
      if (used != e.value.size()) throw std::invalid_argument("trailing characters");
      return v;
    } catch (const std::exception&) {
      throw ConfigError(origin_ + ":" + std::to_string(e.line) + ": field [" + s + "] " + k +
                        " = '" + e.value + "' is not an integer");
    }
  }
  long get_int(const std::string& s, const std::string& k, long fallback) const {
    return has(s, k) ? get_int(s, k) : fallback;
  }

  bool get_bool(const std::string& s, const std::string& k, bool fallback) const {
    if (!has(s, k)) return fallback;
    const Entry& e = require(s, k);
    e.consumed = true;
    if (e.value == "true" || e.value == "1" || e.value == "yes") return true;
    if (e.value == "false" || e.value == "0" || e.value == "no") return false;
    throw ConfigError(origin_ + ":" + std::to_string(e.line) + ": field [" + s + "] " + k +
                      " = '" + e.value + "' is not a boolean");
  }

  /// Comma-separated list value.
  std::vector<std::string> get_list(const std::string& s, const std::string& k) const {
    const std::string raw = get_string(s, k);
    std::vector<std::string> out;
    std::string cur;
    for (char c : raw) {
      if (c == ',') {
        const std::string t = strip(cur);
        if (!t.empty()) out.push_back(t);
        cur.clear();
      } else {
        cur.push_back(c);
      }
    }
    const std::string t = strip(cur);
    if (!t.empty()) out.push_back(t);
    return out;
  }

  /// Requires a section to exist (diagnostic names the missing piece).
  void require_section(const std::string& s) const {
    if (!has_section(s))
      throw ConfigError(origin_ + ": missing required section [" + s + "]");
  }

  /// Rejects any key that was never read — catches typos in config files.
  void reject_unconsumed() const {
    for (const auto& [sec, kv] : sections_)
      for (const auto& [key, e] : kv)
        if (!e.consumed)
          throw ConfigError(origin_ + ":" + std::to_string(e.line) + ": unknown field [" + sec +
                            "] " + key);
  }

  const std::string& origin() const { return origin_; }

 private:
  static std::string strip_comment(const std::string& s) {
    for (std::size_t i = 0; i < s.size(); ++i)
      if (s[i] == '#' || s[i] == ';') return s.substr(0, i);
    return s;
  }
  static std::string strip(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
  }
  const Entry& require(const std::string& s, const std::string& k) const {
    const auto it = sections_.find(s);
    if (it == sections_.end())
      throw ConfigError(origin_ + ": missing required section [" + s + "] (wanted field '" + k +
                        "')");
    const auto jt = it->second.find(k);
    if (jt == it->second.end())
      throw ConfigError(origin_ + ": missing field [" + s + "] " + k);
    return jt->second;
  }

  std::string origin_;
  std::map<std::string, std::map<std::string, Entry>> sections_;
};

}  // namespace cmaf
