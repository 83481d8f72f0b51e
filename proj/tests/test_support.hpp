#pragma once

#include <filesystem>
#include <string>

#include <Eigen/Dense>

#include "ekrmle/linalg.hpp"
#include "ekrmle/rng.hpp"

namespace test_support {

// Random SPD matrix A Aᵀ/d + shift I.
inline Eigen::MatrixXd random_spd(ekrmle::RandomStream& stream, Eigen::Index d,
                                  double shift = 0.1) {
  const Eigen::MatrixXd a = stream.normal_matrix(d, d);
  Eigen::MatrixXd m = a * a.transpose() / static_cast<double>(d);
  m.diagonal().array() += shift;
  return m;
}

// Random PSD matrix of the given rank (B Bᵀ with B d×rank).
inline Eigen::MatrixXd random_psd_rank(ekrmle::RandomStream& stream,
                                       Eigen::Index d, Eigen::Index rank) {
  const Eigen::MatrixXd b = stream.normal_matrix(d, rank);
  return b * b.transpose() / static_cast<double>(rank);
}

inline Eigen::MatrixXd random_orthonormal(ekrmle::RandomStream& stream,
                                          Eigen::Index rows,
                                          Eigen::Index cols) {
  const Eigen::MatrixXd g = stream.normal_matrix(rows, cols);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(rows, cols);
  return q;
}

// Euclidean-orthonormal basis for the column space of a full-column-rank
// matrix (thin Q factor).
inline Eigen::MatrixXd orthonormal_range(const Eigen::MatrixXd& m) {
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(m);
  return qr.householderQ() * Eigen::MatrixXd::Identity(m.rows(), m.cols());
}

// Spectral-norm error relative to max(1, |b|).
inline double rel_err(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return ekrmle::spectral_norm(a - b) /
         std::max(1.0, ekrmle::spectral_norm(b));
}

inline double rel_err(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return (a - b).norm() / std::max(1.0, b.norm());
}

// Fresh unique directory under the system temp root.
inline std::filesystem::path temp_dir(const std::string& hint) {
  static std::uint64_t counter = 0;
  const auto base = std::filesystem::temp_directory_path();
  std::filesystem::path dir;
  do {
    dir = base / (hint + "_" + std::to_string(::getpid()) + "_" +
                  std::to_string(counter++));
  } while (std::filesystem::exists(dir));
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace test_support
