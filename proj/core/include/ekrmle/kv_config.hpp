#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace ekrmle {

/// Flat `key = value` configuration file. Lines starting with '#' and blank
/// lines are ignored; keys keep their first-seen order so that
/// parse(serialize(c)) == c exactly.
class KeyValueConfig {
 public:
  KeyValueConfig() = default;

  static KeyValueConfig parse_string(const std::string& text,
                                     const std::string& origin = "<string>");
  static KeyValueConfig parse_file(const std::filesystem::path& path);

  std::string serialize() const;
  void write_file(const std::filesystem::path& path) const;

  bool has(const std::string& key) const;
  const std::vector<std::string>& keys() const { return order_; }

  void set(const std::string& key, const std::string& value);
  void set_int(const std::string& key, std::int64_t value);
  void set_double(const std::string& key, double value);
  void set_bool(const std::string& key, bool value);

  std::string get_string(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  std::int64_t get_int(const std::string& key) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  double get_double(const std::string& key) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key) const;
  bool get_bool(const std::string& key, bool fallback) const;

  /// Comma-separated lists, e.g. "10,5000".
  std::vector<std::string> get_list(const std::string& key) const;
  std::vector<std::int64_t> get_int_list(const std::string& key) const;

  bool operator==(const KeyValueConfig& other) const {
    return order_ == other.order_ && values_ == other.values_;
  }

 private:
  std::optional<std::string> find(const std::string& key) const;

  std::map<std::string, std::string> values_;
  std::vector<std::string> order_;
};

}  // namespace ekrmle
