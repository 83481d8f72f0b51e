#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace ekrmle {

/// Round-trip-exact decimal rendering of a double (shortest form that parses
/// back to the same bits). All CSV output goes through this, which is what
/// makes repeated runs byte-identical.
std::string format_double(double x);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Column index by name; throws if absent.
  std::size_t column(const std::string& name) const;
};

/// Minimal deterministic CSV writer with typed cell helpers.
class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, std::vector<std::string> header);
  ~CsvWriter();
  CsvWriter(const CsvWriter&) = delete;
  CsvWriter& operator=(const CsvWriter&) = delete;

  CsvWriter& cell(const std::string& value);
  CsvWriter& cell(std::int64_t value);
  CsvWriter& cell(double value);
  void end_row();
  void close();

 private:
  struct Impl;
  Impl* impl_;
};

CsvTable read_csv(const std::filesystem::path& path);

}  // namespace ekrmle
