#pragma once

#include <memory>
#include <string>

#include <Eigen/Dense>

#include "ekrmle/forward_operator.hpp"
#include "ekrmle/inverse_problem.hpp"
#include "ekrmle/lti.hpp"

namespace ekrmle {

// Singular values below rel-tol times the largest one do not count toward
// the usable reduction order.
inline constexpr double kBalanceRankTol = 1e-12;

// Solves A^T X + X A + C = 0 for stable A (all eigenvalue real parts
// negative) and symmetric C. Symmetric A uses the eigendecomposition formula
// X_kl = (V^T C V)_kl / (-lambda_k - lambda_l); general A goes through the
// real Schur form with a quasi-triangular substitution. The residual is
// checked against 1e-8 |C| before returning.
Eigen::MatrixXd solve_lyapunov(const Eigen::MatrixXd& a,
                               const Eigen::MatrixXd& c);

// Q = integral of e^{A^T t} F^T eta_cov^-1 F e^{A t} dt over [0, inf),
// i.e. the Lyapunov solution with C = F^T eta_cov^-1 F.
Eigen::MatrixXd observability_gramian(const LTISystem& system);

// The steady-state covariance of dx = A x dt + dW: solves
// A X + X A^T + I = 0. Using it as the prior makes the pair (Q, prior)
// satisfy the balancing compatibility condition by construction.
Eigen::MatrixXd prior_from_lyapunov(const Eigen::MatrixXd& a);

// Factorizations feeding the square-root balancing transform:
// prior = R R^T (Cholesky), Q = L L^T (pivoted semidefinite Cholesky, L
// rectangular when Q is numerically rank-deficient), and the thin SVD
// L^T R = Phi diag(xi) Psi^T with xi non-increasing. The generalized
// eigenvalues of (Q, prior^-1) are xi^2, with eigenvectors the columns
// of R Psi.
struct BalancingFactors {
  Eigen::MatrixXd r;    // d x d lower-triangular
  Eigen::MatrixXd l;    // d x q, q = numerical rank of Q
  Eigen::MatrixXd phi;  // q x k
  Eigen::VectorXd xi;   // k, non-increasing
  Eigen::MatrixXd psi;  // d x k
};

BalancingFactors balance(const Eigen::MatrixXd& q,
                         const Eigen::MatrixXd& gamma_pr);

// Largest reduction order supported by the factors (count of xi above
// kBalanceRankTol relative to xi[0]).
Eigen::Index usable_order(const BalancingFactors& factors);

// Petrov-Galerkin reduction of the parent system:
//   V^T = Xi_rho^{-1/2} Phi_rho^T L^T,  U = R Psi_rho Xi_rho^{-1/2},
//   A_hat = V^T A U,  F_hat = F U,  with V^T U = I_rho.
// `reduced` carries the rho-dimensional system with the parent's dt,
// observation times, and noise; its initial condition for a full-space
// vector v is V^T v.
struct ReducedModel {
  Eigen::Index order = 0;
  Eigen::MatrixXd v;      // d x rho (columns of V_rho)
  Eigen::MatrixXd u;      // d x rho
  Eigen::MatrixXd a_hat;  // rho x rho
  Eigen::MatrixXd f_hat;  // d_out x rho
  Eigen::VectorXd xi;     // retained singular values
  LTISystem reduced;
  std::shared_ptr<const LTISystem> parent;
};

// Builds the reduction from precomputed factors (cheap per rho), or from
// scratch via the observability Gramian. Requesting rho beyond the usable
// order raises RankError carrying the usable maximum; a reduced system the
// parent timestep cannot integrate stably raises InstabilityError with a
// suggested dt.
ReducedModel reduce(const LTISystem& system, const BalancingFactors& factors,
                    Eigen::Index rho);
ReducedModel reduce(const LTISystem& system, const Eigen::MatrixXd& gamma_pr,
                    Eigen::Index rho);

// apply(v) = stacked reduced outputs from x_hat(0) = V^T v; linear, with
// the parent's observation layout.
ForwardOperator reduced_forward_operator(const ReducedModel& model);

// Dense n x d reduced forward map, assembled as (reduced unit-vector
// probes) * V^T.
Eigen::MatrixXd reduced_forward_matrix(const ReducedModel& model);

// Gaussian posterior of the zero-mean prior N(0, gamma_pr) under the
// materialized reduced forward map and noise covariance gamma.
GaussianPosterior reduced_posterior(const ReducedModel& model,
                                    const Eigen::MatrixXd& gamma_pr,
                                    const Eigen::MatrixXd& gamma,
                                    const Eigen::VectorXd& y);

// Writes Ahat.mtx, Fhat.mtx, Vrho.mtx, Urho.mtx, and xi.csv into an
// existing directory.
void export_reduced_model(const ReducedModel& model,
                          const std::string& directory);

}  // namespace ekrmle
