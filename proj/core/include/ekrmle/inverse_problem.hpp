#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <optional>

#include "ekrmle/forward_operator.hpp"

namespace ekrmle {

struct GaussianPrior {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

struct GaussianPosterior {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

/// Data y, forward map H and noise covariance Gamma defining the weighted
/// least-squares functional |y - H(v)|^2 in the Gamma^-1 norm. A prior turns
/// it into the Bayesian/regularized form.
struct InverseProblem {
  ForwardOperator op;
  Eigen::MatrixXd noise_cov;
  Eigen::VectorXd data;
  std::optional<GaussianPrior> prior;

  Eigen::Index state_dim() const { return op.cols(); }
  Eigen::Index obs_dim() const { return op.rows(); }
};

/// Shape and symmetry checks; throws ShapeError/PreconditionError.
void validate(const InverseProblem& problem);

Eigen::VectorXd apply_forward(const InverseProblem& problem,
                              const Eigen::VectorXd& v);

inline constexpr Eigen::Index kDefaultDensifyThreshold = 5000;

/// Regularized least-squares augmentation: data [y; mu_pr], operator
/// [H(v); v], noise blkdiag(Gamma, Gamma_pr). The prior covariance must be
/// SPD. The block operator stays structural unless n + d fits under the
/// densify threshold, in which case one dense matrix is assembled.
InverseProblem augment_rls(const InverseProblem& problem,
                           const GaussianPrior& prior,
                           Eigen::Index densify_threshold = kDefaultDensifyThreshold);

/// Overload using problem.prior; throws PreconditionError when absent.
InverseProblem augment_rls(const InverseProblem& problem);

/// Weighted pseudoinverse machinery for linear H: the minimum-norm
/// minimizer of |y - Hv|^2_{Gamma^-1} is (H^T Gamma^-1 H)^+ H^T Gamma^-1 y.
/// Built once (whiten by the noise Cholesky factor, then SVD with relative
/// cutoff) and applied to many right-hand sides.
class WeightedPseudoinverse {
 public:
  static constexpr double kDefaultCutoff = 1e-12;

  WeightedPseudoinverse(const Eigen::MatrixXd& h, const Eigen::MatrixXd& gamma,
                        double rel_cutoff = kDefaultCutoff);

  Eigen::Index rank() const { return rank_; }

  Eigen::VectorXd solve(const Eigen::VectorXd& y) const;
  Eigen::MatrixXd solve_batch(const Eigen::MatrixXd& ys) const;

  /// (H^T Gamma^-1 H)^+ as a dense d x d matrix.
  Eigen::MatrixXd normal_pseudoinverse() const;

  /// H^T Gamma^-1 H as a dense d x d matrix (no inversion involved).
  const Eigen::MatrixXd& normal_matrix() const { return normal_; }

 private:
  Eigen::Index rank_;
  Eigen::MatrixXd right_;           // kept right singular vectors (d x r)
  Eigen::MatrixXd lifted_left_;     // L^-T U_r, maps whitened coeffs back
  Eigen::VectorXd inv_singular_;    // 1/sigma_i, kept part
  Eigen::MatrixXd normal_;          // H^T Gamma^-1 H
};

/// Minimum-norm weighted least-squares solution for a linear operator.
Eigen::VectorXd minimum_norm_solution(const ForwardOperator& op,
                                      const Eigen::MatrixXd& gamma,
                                      const Eigen::VectorXd& y);
Eigen::VectorXd minimum_norm_solution(const Eigen::MatrixXd& h,
                                      const Eigen::MatrixXd& gamma,
                                      const Eigen::VectorXd& y);

/// Closed-form Gaussian posterior for a linear problem with SPD prior and
/// noise covariances. All SPD solves go through Cholesky factorizations.
GaussianPosterior exact_posterior(const InverseProblem& problem);

}  // namespace ekrmle
