#include "ekrmle/kv_config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "ekrmle/errors.hpp"

namespace ekrmle {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::string format_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  double check = 0.0;
  std::sscanf(buf, "%lf", &check);
  if (check == x) {
    for (int prec = 1; prec < 17; ++prec) {
      char shorter[40];
      std::snprintf(shorter, sizeof(shorter), "%.*g", prec, x);
      std::sscanf(shorter, "%lf", &check);
      if (check == x) return shorter;
    }
  }
  return buf;
}

}  // namespace

KeyValueConfig KeyValueConfig::parse_string(const std::string& text,
                                            const std::string& origin) {
  KeyValueConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw IoError("config: " + origin + ":" + std::to_string(lineno) +
                    ": expected 'key = value', got '" + t + "'");
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    if (key.empty())
      throw IoError("config: " + origin + ":" + std::to_string(lineno) +
                    ": empty key");
    cfg.set(key, value);
  }
  return cfg;
}

KeyValueConfig KeyValueConfig::parse_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config: cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_string(ss.str(), path.string());
}

std::string KeyValueConfig::serialize() const {
  std::ostringstream out;
  for (const auto& key : order_) out << key << " = " << values_.at(key) << "\n";
  return out.str();
}

void KeyValueConfig::write_file(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("config: cannot write " + path.string());
  out << serialize();
  if (!out) throw IoError("config: write failed for " + path.string());
}

bool KeyValueConfig::has(const std::string& key) const {
  return values_.count(key) != 0;
}

void KeyValueConfig::set(const std::string& key, const std::string& value) {
  if (!values_.count(key)) order_.push_back(key);
  values_[key] = value;
}

void KeyValueConfig::set_int(const std::string& key, std::int64_t value) {
  set(key, std::to_string(value));
}

void KeyValueConfig::set_double(const std::string& key, double value) {
  set(key, format_double(value));
}

void KeyValueConfig::set_bool(const std::string& key, bool value) {
  set(key, value ? "true" : "false");
}

std::optional<std::string> KeyValueConfig::find(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return std::nullopt;
  return it->second;
}

std::string KeyValueConfig::get_string(const std::string& key) const {
  const auto v = find(key);
  if (!v) throw IoError("config: missing required key '" + key + "'");
  return *v;
}

std::string KeyValueConfig::get_string(const std::string& key,
                                       const std::string& fallback) const {
  return find(key).value_or(fallback);
}

std::int64_t KeyValueConfig::get_int(const std::string& key) const {
  const std::string v = get_string(key);
  try {
    std::size_t used = 0;
    const std::int64_t r = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw IoError("config: key '" + key + "' is not an integer: '" + v + "'");
  }
}

std::int64_t KeyValueConfig::get_int(const std::string& key,
                                     std::int64_t fallback) const {
  return has(key) ? get_int(key) : fallback;
}

double KeyValueConfig::get_double(const std::string& key) const {
  const std::string v = get_string(key);
  try {
    std::size_t used = 0;
    const double r = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw IoError("config: key '" + key + "' is not a number: '" + v + "'");
  }
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
  return has(key) ? get_double(key) : fallback;
}

bool KeyValueConfig::get_bool(const std::string& key) const {
  const std::string v = get_string(key);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw IoError("config: key '" + key + "' is not a boolean: '" + v + "'");
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) const {
  return has(key) ? get_bool(key) : fallback;
}

std::vector<std::string> KeyValueConfig::get_list(const std::string& key) const {
  const std::string v = get_string(key);
  std::vector<std::string> items;
  std::string item;
  std::istringstream ss(v);
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) items.push_back(item);
  }
  return items;
}

std::vector<std::int64_t> KeyValueConfig::get_int_list(
    const std::string& key) const {
  std::vector<std::int64_t> out;
  for (const auto& item : get_list(key)) {
    try {
      out.push_back(std::stoll(item));
    } catch (const std::exception&) {
      throw IoError("config: key '" + key + "' has non-integer item '" + item +
                    "'");
    }
  }
  return out;
}

}  // namespace ekrmle
