#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "seq2seq/common.hpp"

namespace seq2seq {

/// Line-oriented `key = value` configuration with `[section]` headers and
/// `#` comments. Every key must be consumed by the command that runs, so
/// unknown keys are rejected with their full path; the resolved snapshot is
/// written beside each run's outputs.
class RunConfig {
 public:
  RunConfig() = default;

  static RunConfig from_string(const std::string& text, const std::string& origin = "<string>") {
    RunConfig cfg;
    cfg.origin_ = origin;
    std::istringstream is(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      const std::string trimmed = trim(line);
      if (trimmed.empty() || trimmed[0] == '#') continue;
      if (trimmed.front() == '[') {
        if (trimmed.back() != ']')
          throw ConfigError(origin + ":" + std::to_string(lineno) + ": malformed section header");
        section = trimmed.substr(1, trimmed.size() - 2);
        cfg.section_order_.push_back(section);
        continue;
      }
      const auto eq = trimmed.find('=');
      if (eq == std::string::npos)
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
      const std::string key = trim(trimmed.substr(0, eq));
      const std::string value = trim(trimmed.substr(eq + 1));
      if (key.empty())
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
      cfg.set(section, key, value);
    }
    return cfg;
  }

  static RunConfig load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FileError("cannot read config file: " + path.string());
    std::stringstream buf;
    buf << is.rdbuf();
    return from_string(buf.str(), path.string());
  }

  void set(const std::string& section, const std::string& key, const std::string& value) {
    auto& sec = sections_[section];
    if (!sec.count(key)) key_order_[section].push_back(key);
    sec[key] = value;
  }

  bool has(const std::string& section, const std::string& key) const {
    consumed_.insert(path_of(section, key));
    auto it = sections_.find(section);
    return it != sections_.end() && it->second.count(key) > 0;
  }

  std::string get_str(const std::string& section, const std::string& key,
                      std::optional<std::string> fallback = std::nullopt) const {
    consumed_.insert(path_of(section, key));
    auto it = sections_.find(section);
    if (it != sections_.end()) {
      auto kt = it->second.find(key);
      if (kt != it->second.end()) return kt->second;
    }
    if (fallback) return *fallback;
    throw ConfigError("missing required config key " + path_of(section, key));
  }

  long long get_int(const std::string& section, const std::string& key,
                    std::optional<long long> fallback = std::nullopt) const {
    consumed_.insert(path_of(section, key));
    auto raw = raw_value(section, key);
    if (!raw) {
      if (fallback) return *fallback;
      throw ConfigError("missing required config key " + path_of(section, key));
    }
    try {
      std::size_t used = 0;
      const long long v = std::stoll(*raw, &used);
      if (used != raw->size()) throw std::invalid_argument("");
      return v;
    } catch (const std::exception&) {
      throw ConfigError(path_of(section, key) + ": '" + *raw + "' is not an integer");
    }
  }

  double get_double(const std::string& section, const std::string& key,
                    std::optional<double> fallback = std::nullopt) const {
    consumed_.insert(path_of(section, key));
    auto raw = raw_value(section, key);
    if (!raw) {
      if (fallback) return *fallback;
      throw ConfigError("missing required config key " + path_of(section, key));
    }
    try {
      std::size_t used = 0;
      const double v = std::stod(*raw, &used);
      if (used != raw->size()) throw std::invalid_argument("");
      return v;
    } catch (const std::exception&) {
      throw ConfigError(path_of(section, key) + ": '" + *raw + "' is not a number");
    }
  }

  bool get_bool(const std::string& section, const std::string& key, bool fallback) const {
    consumed_.insert(path_of(section, key));
    auto raw = raw_value(section, key);
    if (!raw) return fallback;
    if (*raw == "1" || *raw == "true" || *raw == "yes") return true;
    if (*raw == "0" || *raw == "false" || *raw == "no") return false;
    throw ConfigError(path_of(section, key) + ": '" + *raw + "' is not a boolean");
  }

  /// Fails on any key that no getter touched; the sections listed in
  /// `irrelevant` are skipped wholesale (they belong to other subcommands).
  void reject_unknown(const std::set<std::string>& irrelevant = {}) const {
    for (const auto& [section, kv] : sections_) {
      if (irrelevant.count(section)) continue;
      for (const auto& [key, value] : kv)
        if (!consumed_.count(path_of(section, key)))
          throw ConfigError("unknown config key " + path_of(section, key));
    }
  }

  std::string snapshot() const {
    std::ostringstream os;
    auto dump_section = [&](const std::string& section) {
      auto it = sections_.find(section);
      if (it == sections_.end()) return;
      if (!section.empty()) os << "[" << section << "]\n";
      auto ko = key_order_.find(section);
      for (const std::string& key : ko->second) os << key << " = " << it->second.at(key) << "\n";
      os << "\n";
    };
    dump_section("");
    std::set<std::string> done{""};
    for (const std::string& s : section_order_)
      if (done.insert(s).second) dump_section(s);
    for (const auto& [s, kv] : sections_)
      if (done.insert(s).second) dump_section(s);
    return os.str();
  }

 private:
  std::string origin_;
  std::map<std::string, std::map<std::string, std::string>> sections_;
  std::map<std::string, std::vector<std::string>> key_order_;
  std::vector<std::string> section_order_;
  mutable std::set<std::string> consumed_;

  std::optional<std::string> raw_value(const std::string& section, const std::string& key) const {
    auto it = sections_.find(section);
    if (it == sections_.end()) return std::nullopt;
    auto kt = it->second.find(key);
    if (kt == it->second.end()) return std::nullopt;
    return kt->second;
  }

  static std::string path_of(const std::string& section, const std::string& key) {
    return section.empty() ? key : "[" + section + "] " + key;
  }

  static std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
  }
};

}  // namespace seq2seq
