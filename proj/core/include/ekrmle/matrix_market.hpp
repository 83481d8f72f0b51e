#pragma once

#include <Eigen/Core>
#include <filesystem>
#include <string>

namespace ekrmle {

/// Symmetry declared in a Matrix Market header. Covariance files are
/// written as `symmetric` and readers of covariance inputs require it.
enum class MarketSymmetry { General, Symmetric };

struct MarketMatrix {
  Eigen::MatrixXd values;
  MarketSymmetry symmetry = MarketSymmetry::General;
};

/// Read a real dense or coordinate Matrix Market file. Symmetric storage is
/// expanded to a full matrix; the declared symmetry is reported so callers
/// can enforce it.
MarketMatrix read_matrix_market(const std::filesystem::path& path);

/// Convenience wrappers with shape and symmetry validation.
Eigen::MatrixXd read_market_matrix(const std::filesystem::path& path);
Eigen::VectorXd read_market_vector(const std::filesystem::path& path);
Eigen::MatrixXd read_market_covariance(const std::filesystem::path& path);

/// Write in `array` (dense) format with round-trip-exact decimal output.
/// Symmetric writes store the lower triangle only, as the format specifies.
void write_matrix_market(const std::filesystem::path& path,
                         const Eigen::MatrixXd& m,
                         MarketSymmetry symmetry = MarketSymmetry::General,
                         const std::string& comment = {});

void write_market_vector(const std::filesystem::path& path,
                         const Eigen::VectorXd& v,
                         const std::string& comment = {});

/// Validates symmetry of `m` (to round-off) and writes it as `symmetric`.
void write_market_covariance(const std::filesystem::path& path,
                             const Eigen::MatrixXd& m,
                             const std::string& comment = {});

}  // namespace ekrmle
