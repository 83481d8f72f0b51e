#include "ekrmle/csv.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "ekrmle/errors.hpp"

namespace ekrmle {

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

std::size_t CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return i;
  throw IoError("csv: no column named '" + name + "'");
}

struct CsvWriter::Impl {
  std::ofstream out;
  std::filesystem::path path;
  std::size_t width = 0;
  std::size_t in_row = 0;
};

CsvWriter::CsvWriter(const std::filesystem::path& path,
                     std::vector<std::string> header)
    : impl_(new Impl) {
  impl_->path = path;
  impl_->out.open(path);
  if (!impl_->out) {
    delete impl_;
    throw IoError("csv: cannot write " + path.string());
  }
  impl_->width = header.size();
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (i) impl_->out << ",";
    impl_->out << header[i];
  }
  impl_->out << "\n";
}

CsvWriter::~CsvWriter() {
  if (impl_) {
    impl_->out.flush();
    delete impl_;
  }
}

CsvWriter& CsvWriter::cell(const std::string& value) {
  if (impl_->in_row) impl_->out << ",";
  impl_->out << value;
  ++impl_->in_row;
  return *this;
}

CsvWriter& CsvWriter::cell(std::int64_t value) {
  return cell(std::to_string(value));
}

CsvWriter& CsvWriter::cell(double value) { return cell(format_double(value)); }

void CsvWriter::end_row() {
  if (impl_->in_row != impl_->width)
    throw IoError("csv: row width " + std::to_string(impl_->in_row) +
                  " does not match header width " +
                  std::to_string(impl_->width) + " in " +
                  impl_->path.string());
  impl_->out << "\n";
  impl_->in_row = 0;
}

void CsvWriter::close() {
  impl_->out.flush();
  impl_->out.close();
  if (!impl_->out) throw IoError("csv: write failed for " + impl_->path.string());
}

CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("csv: cannot open " + path.string());
  CsvTable table;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() && in.eof()) break;
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.push_back("");
    if (first) {
      table.header = std::move(cells);
      first = false;
    } else {
      table.rows.push_back(std::move(cells));
    }
  }
  return table;
}

}  // namespace ekrmle
