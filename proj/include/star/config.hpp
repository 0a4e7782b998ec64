// Minimal TOML-style config reader: [dotted.sections], key = value lines,
// '#' comments. Values: integers, floats, booleans, quoted strings and flat
// arrays. Keys are addressed fully dotted ("stage.lr").
#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "star/common.hpp"

namespace star::io {

class ConfigTree {
 public:
  static ConfigTree parse_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
  }

  static ConfigTree parse(const std::string& text) {
    ConfigTree t;
    std::istringstream is(text);
    std::string line, section;
    int line_no = 0;
    while (std::getline(is, line)) {
      ++line_no;
      auto hash = line.find('#');
      if (hash != std::string::npos) {
        // keep '#' inside quoted strings
        auto quote = line.find('"');
        if (quote == std::string::npos || hash < quote) line = line.substr(0, hash);
      }
      std::string s = trim(line);
      if (s.empty()) continue;
      if (s.front() == '[') {
        if (s.back() != ']') throw ConfigError("config line " + std::to_string(line_no) +
                                               ": unterminated section header");
        section = trim(s.substr(1, s.size() - 2));
        continue;
      }
      auto eq = s.find('=');
      if (eq == std::string::npos)
        throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
      std::string key = trim(s.substr(0, eq));
      std::string value = trim(s.substr(eq + 1));
      if (key.empty() || value.empty())
        throw ConfigError("config line " + std::to_string(line_no) + ": empty key or value");
      t.values_[section.empty() ? key : section + "." + key] = value;
    }
    return t;
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  long long get_int(const std::string& key, long long def) const {
    auto it = values_.find(key);
    if (it == values_.end()) return def;
    try {
      return std::stoll(it->second);
    } catch (...) {
      throw ConfigError("config key '" + key + "' is not an integer: " + it->second);
    }
  }

  double get_double(const std::string& key, double def) const {
    auto it = values_.find(key);
    if (it == values_.end()) return def;
    try {
      return std::stod(it->second);
    } catch (...) {
      throw ConfigError("config key '" + key + "' is not a number: " + it->second);
    }
  }

  bool get_bool(const std::string& key, bool def) const {
    auto it = values_.find(key);
    if (it == values_.end()) return def;
    if (it->second == "true") return true;
    if (it->second == "false") return false;
    throw ConfigError("config key '" + key + "' is not a boolean: " + it->second);
  }

  std::string get_string(const std::string& key, const std::string& def) const {
    auto it = values_.find(key);
    if (it == values_.end()) return def;
    std::string v = it->second;
    if (v.size() >= 2 && v.front() == '"' && v.back() == '"') return v.substr(1, v.size() - 2);
    return v;
  }

  std::vector<double> get_array(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) return {};
    std::string v = it->second;
    if (v.size() < 2 || v.front() != '[' || v.back() != ']')
      throw ConfigError("config key '" + key + "' is not an array: " + v);
    std::vector<double> out;
    std::string body = v.substr(1, v.size() - 2);
    std::istringstream is(body);
    std::string item;
    while (std::getline(is, item, ',')) {
      std::string t = trim(item);
      if (t.empty()) continue;
      try {
        out.push_back(std::stod(t));
      } catch (...) {
        throw ConfigError("config key '" + key + "' has a non-numeric element: " + t);
      }
    }
    return out;
  }

  const std::map<std::string, std::string>& raw() const { return values_; }

 private:
  static std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  }

  std::map<std::string, std::string> values_;
};

}  // namespace star::io
