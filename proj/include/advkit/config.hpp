#pragma once

#include <map>
#include <string>
#include <vector>

namespace advkit {

// Plain-text run configuration: one `key = value` per line, '#' comments.
// Values may be rational literals like 8/255, parsed exactly as the quotient
// of the two integers so eps never drifts across runs.
class RunConfig {
 public:
  RunConfig() = default;
  static RunConfig from_file(const std::string& path);
  static RunConfig from_string(const std::string& text);

  bool has(const std::string& key) const;
  void set(const std::string& key, const std::string& value);

  std::string get_string(const std::string& key, const std::string& fallback) const;
  int64_t get_int(const std::string& key, int64_t fallback) const;
  double get_number(const std::string& key, double fallback) const;  // rationals ok
  bool get_bool(const std::string& key, bool fallback) const;

  const std::map<std::string, std::string>& entries() const { return entries_; }

  // Rejects keys outside the documented set (typo guard).
  void validate_keys(const std::vector<std::string>& known) const;

 private:
  std::map<std::string, std::string> entries_;
};

double parse_rational(const std::string& text);

}  // namespace advkit
