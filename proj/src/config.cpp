#include "advkit/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace advkit {

namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

}  // namespace

double parse_rational(const std::string& text) {
  const auto slash = text.find('/');
  try {
    if (slash != std::string::npos) {
      const double num = std::stod(trim(text.substr(0, slash)));
      const double den = std::stod(trim(text.substr(slash + 1)));
      if (den == 0) throw std::invalid_argument("zero denominator");
      return num / den;
    }
    size_t used = 0;
    const double v = std::stod(text, &used);
    if (trim(text.substr(used)).size())
      throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw std::invalid_argument("cannot parse number '" + text + "'");
  }
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config " + path);
  std::stringstream buf;
  buf << is.rdbuf();
  return from_string(buf.str());
}

RunConfig RunConfig::from_string(const std::string& text) {
  RunConfig cfg;
  std::istringstream is(text);
  std::string line;
  size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config line " + std::to_string(lineno) +
                               ": expected key = value, got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw std::runtime_error("config line " + std::to_string(lineno) +
                               ": empty key");
    cfg.entries_[key] = value;
  }
  return cfg;
}

bool RunConfig::has(const std::string& key) const { return entries_.count(key) > 0; }

void RunConfig::set(const std::string& key, const std::string& value) {
  entries_[key] = value;
}

std::string RunConfig::get_string(const std::string& key,
                                  const std::string& fallback) const {
  auto it = entries_.find(key);
  return it == entries_.end() ? fallback : it->second;
}

int64_t RunConfig::get_int(const std::string& key, int64_t fallback) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  try {
    size_t used = 0;
    const long long v = std::stoll(it->second, &used);
    if (trim(it->second.substr(used)).size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error("config key '" + key + "': cannot parse integer '" +
                             it->second + "'");
  }
}

double RunConfig::get_number(const std::string& key, double fallback) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  try {
    return parse_rational(it->second);
  } catch (const std::exception&) {
    throw std::runtime_error("config key '" + key + "': cannot parse number '" +
                             it->second + "'");
  }
}

bool RunConfig::get_bool(const std::string& key, bool fallback) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  std::string v = it->second;
  std::transform(v.begin(), v.end(), v.begin(), ::tolower);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw std::runtime_error("config key '" + key + "': cannot parse boolean '" +
                           it->second + "'");
}

void RunConfig::validate_keys(const std::vector<std::string>& known) const {
  for (const auto& [key, value] : entries_)
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw std::runtime_error("unknown config key '" + key + "'");
}

}  // namespace advkit
