#include "ekrmle/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include "ekrmle/errors.hpp"

namespace ekrmle {

double spectral_norm(const Eigen::MatrixXd& m) {
  if (m.size() == 0) return 0.0;
  if (m.rows() <= 16 && m.cols() <= 16)
    return Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues()(0);
  return Eigen::BDCSVD<Eigen::MatrixXd>(m).singularValues()(0);
}

void require_symmetric(const Eigen::MatrixXd& m, const char* what,
                       double rel_tol) {
  if (m.rows() != m.cols())
    throw ShapeError(std::string(what) + " must be square, got " +
                     std::to_string(m.rows()) + "x" +
                     std::to_string(m.cols()));
  if (m.size() == 0) return;
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  const double dev = (m - m.transpose()).cwiseAbs().maxCoeff();
  if (dev > rel_tol * scale)
    throw PreconditionError(std::string(what) + " must be symmetric");
}

Eigen::LLT<Eigen::MatrixXd> spd_cholesky(const Eigen::MatrixXd& m,
                                         const char* what) {
  require_symmetric(m, what);
  Eigen::LLT<Eigen::MatrixXd> llt(m);
  if (llt.info() != Eigen::Success)
    throw PreconditionError(std::string(what) +
                            " must be symmetric positive definite");
  return llt;
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, const char* what,
                         double rel_tol) {
  require_symmetric(m, what);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
  if (eig.info() != Eigen::Success)
    throw NumericalError(std::string(what) + ": eigendecomposition failed");
  const Eigen::VectorXd& vals = eig.eigenvalues();
  const double top = vals.size() ? std::max(0.0, vals(vals.size() - 1)) : 0.0;
  Eigen::VectorXd roots(vals.size());
  for (Eigen::Index i = 0; i < vals.size(); ++i) {
    if (vals(i) < -rel_tol * std::max(top, 1e-300))
      throw PreconditionError(std::string(what) +
                              " must be positive semidefinite");
    roots(i) = std::sqrt(std::max(vals(i), 0.0));
  }
  return eig.eigenvectors() * roots.asDiagonal() *
         eig.eigenvectors().transpose();
}

}  // namespace ekrmle
