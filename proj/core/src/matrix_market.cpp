#include "ekrmle/matrix_market.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <vector>

#include "ekrmle/errors.hpp"

namespace ekrmle {

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  return s;
}

/// Shortest decimal form that parses back to the same double.
std::string format_value(double x) {
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

[[noreturn]] void fail(const std::filesystem::path& path, const std::string& msg) {
  throw IoError("matrix market: " + path.string() + ": " + msg);
}

bool next_data_line(std::istream& in, std::string& line) {
  while (std::getline(in, line)) {
    const auto pos = line.find_first_not_of(" \t\r");
    if (pos == std::string::npos) continue;
    if (line[pos] == '%') continue;
    return true;
  }
  return false;
}

}  // namespace

MarketMatrix read_matrix_market(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(path, "cannot open file");

  std::string banner;
  if (!std::getline(in, banner)) fail(path, "empty file");
  std::istringstream hs(banner);
  std::string tag, object, format, field, symmetry;
  hs >> tag >> object >> format >> field >> symmetry;
  if (lower(tag) != "%%matrixmarket" || lower(object) != "matrix")
    fail(path, "not a Matrix Market matrix file");
  format = lower(format);
  field = lower(field);
  symmetry = lower(symmetry);
  if (field != "real" && field != "double" && field != "integer")
    fail(path, "unsupported field '" + field + "' (real data required)");
  if (symmetry != "general" && symmetry != "symmetric")
    fail(path, "unsupported symmetry '" + symmetry + "'");
  const MarketSymmetry sym = symmetry == "symmetric" ? MarketSymmetry::Symmetric
                                                     : MarketSymmetry::General;

  std::string line;
  if (!next_data_line(in, line)) fail(path, "missing size line");
  std::istringstream ss(line);

  if (format == "array") {
    Eigen::Index rows = 0, cols = 0;
    if (!(ss >> rows >> cols) || rows < 0 || cols < 0)
      fail(path, "bad array size line");
    if (sym == MarketSymmetry::Symmetric && rows != cols)
      fail(path, "symmetric array must be square");
    Eigen::MatrixXd m(rows, cols);
    // Array data is column-major; symmetric files store the lower triangle.
    for (Eigen::Index j = 0; j < cols; ++j) {
      const Eigen::Index first = sym == MarketSymmetry::Symmetric ? j : 0;
      for (Eigen::Index i = first; i < rows; ++i) {
        double v;
        if (!(in >> v)) fail(path, "truncated array data");
        m(i, j) = v;
        if (sym == MarketSymmetry::Symmetric) m(j, i) = v;
      }
    }
    return {std::move(m), sym};
  }

  if (format == "coordinate") {
    Eigen::Index rows = 0, cols = 0;
    std::int64_t nnz = 0;
    if (!(ss >> rows >> cols >> nnz) || rows < 0 || cols < 0 || nnz < 0)
      fail(path, "bad coordinate size line");
    if (sym == MarketSymmetry::Symmetric && rows != cols)
      fail(path, "symmetric matrix must be square");
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(rows, cols);
    for (std::int64_t k = 0; k < nnz; ++k) {
      Eigen::Index i, j;
      double v;
      if (!(in >> i >> j >> v)) fail(path, "truncated coordinate data");
      if (i < 1 || i > rows || j < 1 || j > cols)
        fail(path, "coordinate entry out of range");
      m(i - 1, j - 1) = v;
      if (sym == MarketSymmetry::Symmetric) m(j - 1, i - 1) = v;
    }
    return {std::move(m), sym};
  }

  fail(path, "unsupported format '" + format + "'");
}

Eigen::MatrixXd read_market_matrix(const std::filesystem::path& path) {
  return read_matrix_market(path).values;
}

Eigen::VectorXd read_market_vector(const std::filesystem::path& path) {
  MarketMatrix m = read_matrix_market(path);
  if (m.values.cols() == 1) return m.values.col(0);
  if (m.values.rows() == 1) return m.values.row(0).transpose();
  throw IoError("matrix market: " + path.string() +
                ": expected a vector, got " + std::to_string(m.values.rows()) +
                "x" + std::to_string(m.values.cols()));
}

Eigen::MatrixXd read_market_covariance(const std::filesystem::path& path) {
  MarketMatrix m = read_matrix_market(path);
  if (m.symmetry != MarketSymmetry::Symmetric)
    throw IoError("matrix market: " + path.string() +
                  ": covariance file must declare 'symmetric'");
  return m.values;
}

void write_matrix_market(const std::filesystem::path& path,
                         const Eigen::MatrixXd& m, MarketSymmetry symmetry,
                         const std::string& comment) {
  if (symmetry == MarketSymmetry::Symmetric && m.rows() != m.cols())
    throw ShapeError("matrix market: symmetric write requires a square matrix");
  std::ofstream out(path);
  if (!out) throw IoError("matrix market: cannot write " + path.string());
  out << "%%MatrixMarket matrix array real "
      << (symmetry == MarketSymmetry::Symmetric ? "symmetric" : "general")
      << "\n";
  if (!comment.empty()) out << "% " << comment << "\n";
  out << m.rows() << " " << m.cols() << "\n";
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    const Eigen::Index first = symmetry == MarketSymmetry::Symmetric ? j : 0;
    for (Eigen::Index i = first; i < m.rows(); ++i)
      out << format_value(m(i, j)) << "\n";
  }
  if (!out) throw IoError("matrix market: write failed for " + path.string());
}

void write_market_vector(const std::filesystem::path& path,
                         const Eigen::VectorXd& v, const std::string& comment) {
  write_matrix_market(path, v, MarketSymmetry::General, comment);
}

void write_market_covariance(const std::filesystem::path& path,
                             const Eigen::MatrixXd& m,
                             const std::string& comment) {
  if (m.rows() != m.cols())
    throw ShapeError("matrix market: covariance must be square");
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale)
    throw PreconditionError("matrix market: covariance is not symmetric");
  // Store the symmetrized lower triangle so the declaration is exact.
  Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
  write_matrix_market(path, sym, MarketSymmetry::Symmetric, comment);
}

}  // namespace ekrmle
