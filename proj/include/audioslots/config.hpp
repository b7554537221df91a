#pragma once

// Flat `key=value` configuration text. Blank lines and lines starting with
// '#' are ignored. Later assignments override earlier ones.

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "audioslots/errors.hpp"

namespace audioslots::config {

using KeyValues = std::map<std::string, std::string>;

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline KeyValues parse(const std::string& text) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw InvalidArgument("config line " + std::to_string(lineno) + " is not key=value: " + line);
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw InvalidArgument("config line " + std::to_string(lineno) + " has an empty key");
    kv[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

inline KeyValues load_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

inline std::string serialize(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

template <class N>
N parse_number(const std::string& key, const std::string& v) {
  N out{};
  if constexpr (std::is_floating_point_v<N>) {
    try {
      std::size_t pos = 0;
      const double d = std::stod(v, &pos);
      if (pos != v.size()) throw InvalidArgument("");
      out = static_cast<N>(d);
    } catch (const std::exception&) {
      throw InvalidArgument("config key " + key + ": not a number: " + v);
    }
  } else {
    const auto* end = v.data() + v.size();
    const auto res = std::from_chars(v.data(), end, out);
    if (res.ec != std::errc() || res.ptr != end) throw InvalidArgument("config key " + key + ": not an integer: " + v);
  }
  return out;
}

inline std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_number<std::size_t>(key, item));
  }
  return out;
}

inline std::string join(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

/// Reads a key into `dst` if present.
template <class N>
void read(const KeyValues& kv, const std::string& key, N& dst) {
  const auto it = kv.find(key);
  if (it == kv.end()) return;
  if constexpr (std::is_same_v<N, std::string>) {
    dst = it->second;
  } else if constexpr (std::is_same_v<N, std::vector<std::size_t>>) {
    dst = parse_list(key, it->second);
  } else if constexpr (std::is_same_v<N, bool>) {
    dst = it->second == "1" || it->second == "true";
  } else {
    dst = parse_number<N>(key, it->second);
  }
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace audioslots::config
