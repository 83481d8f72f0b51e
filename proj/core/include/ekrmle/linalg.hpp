#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>

namespace ekrmle {

/// Largest singular value.
double spectral_norm(const Eigen::MatrixXd& m);

/// Throws PreconditionError when m deviates from symmetry by more than
/// rel_tol relative to its largest entry.
void require_symmetric(const Eigen::MatrixXd& m, const char* what,
                       double rel_tol = 1e-10);

/// Cholesky factorization that throws PreconditionError (naming `what`) when
/// the matrix is not numerically SPD.
Eigen::LLT<Eigen::MatrixXd> spd_cholesky(const Eigen::MatrixXd& m,
                                         const char* what);

/// Symmetric square root of a PSD matrix. Eigenvalues in
/// [-rel_tol*max, rel_tol*max] are clamped to zero; anything more negative
/// throws PreconditionError naming `what`.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, const char* what,
                         double rel_tol = 1e-10);

}  // namespace ekrmle
