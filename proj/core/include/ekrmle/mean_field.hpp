#pragma once

#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ekrmle/ensemble.hpp"
#include "ekrmle/inverse_problem.hpp"

namespace ekrmle {

// Eigenvalues below rel-tol times the largest one do not count toward the
// spectral rank (mirrors the pseudoinverse cutoff).
inline constexpr double kSpectralRankTol = 1e-10;

// Spectral data of C0 H^T Gamma^-1 H restricted to its nonzero eigenvalues.
// Columns of `basis` are eigenvectors u_l normalized so that
// U^T H^T Gamma^-1 H U = I_r. `projector` is P = U U^T H^T Gamma^-1 H, the
// oblique projector onto the convergent subspace; `complement` is S = I - P.
struct StateSpectral {
  Eigen::VectorXd eigenvalues;  // non-increasing, length r
  Eigen::MatrixXd basis;        // d x r
  Eigen::Index rank = 0;
  Eigen::MatrixXd projector;    // d x d
  Eigen::MatrixXd complement;   // d x d
};

// Spectral data of the pencil H C0 H^T w = lambda Gamma w. Columns of
// `basis` are eigenvectors w_l with W^T Gamma W = I_r; `projector` is
// Gamma W W^T and `complement` its complement.
struct ObsSpectral {
  Eigen::VectorXd eigenvalues;  // non-increasing, length r
  Eigen::MatrixXd basis;        // n x r
  Eigen::Index rank = 0;
  Eigen::MatrixXd projector;    // n x n
  Eigen::MatrixXd complement;   // n x n
};

// Both eigenproblems are solved through the symmetric whitened form
// L^-1 H C0 H^T L^-T (Gamma = L L^T); state eigenvectors are recovered as
// u = lambda^-1 C0 H^T w, which keeps the required normalizations exact.
StateSpectral state_eigenproblem(const Eigen::MatrixXd& c0,
                                 const Eigen::MatrixXd& h,
                                 const Eigen::MatrixXd& gamma,
                                 double rank_tol = kSpectralRankTol);
ObsSpectral obs_eigenproblem(const Eigen::MatrixXd& c0,
                             const Eigen::MatrixXd& h,
                             const Eigen::MatrixXd& gamma,
                             double rank_tol = kSpectralRankTol);

// The closed-form evolution of one eigenvalue of C_i H^T Gamma^-1 H under
// the mean-field covariance iteration:
//   lambda_{i+1} = 1 - 2 prod_{k<=i}(1+lambda_k)^-1
//                    + (1+lambda_0) prod_{k<=i}(1+lambda_k)^-2.
// `complement` holds 1 - lambda_i computed without cancellation (the gaps
// shrink below machine epsilon long before lambda stops changing), via
//   gap_{i+1} = p_i (2 - (1+lambda_0) p_i),  p_i = prod_{k<=i}(1+lambda_k)^-1.
struct EigenvalueSequence {
  std::vector<double> lambda;      // entries 0..imax
  std::vector<double> complement;  // 1 - lambda_i, stable form
};

EigenvalueSequence eigenvalue_recurrence(double lambda0, int imax);

// Contraction exponent gamma = lambda0 / (1 + 2 lambda0).
double rate_exponent(double lambda0);

// Upper bound on the gap 1 - lambda_{i+1}, valid for i >= 1:
//   1 - lambda_{i+1} <= 2 (1 + 2 lambda0)^-1 exp(-(i-1) gamma).
double rate_bound(double lambda0, int i);

// Mean-field covariance iteration state. `state_map` is the compound
// residual map taking iteration-0 residuals to iteration-i residuals
// (product of the per-step maps (I + C_k H^T Gamma^-1 H)^-1, identity at
// i = 0); `obs_map` is its observation-space counterpart, the product of
// the per-step maps Gamma (H C_k H^T + Gamma)^-1. They intertwine:
// H state_map = obs_map H.
struct MeanFieldState {
  int iteration = 0;
  Eigen::MatrixXd covariance;  // d x d
  Eigen::MatrixXd state_map;   // d x d
  Eigen::MatrixXd obs_map;     // n x n
  std::string warning;         // non-empty if a solve was ill-conditioned
};

// Iterates the deterministic covariance evolution
//   C_{i+1} = M_{i:0} C_0 M_{i:0}^T
//             + (I - M_{i:0}) (H^T Gamma^-1 H)^dag (I - M_{i:0})^T
// and returns states for iterations 0..imax.
std::vector<MeanFieldState> mean_field_cov_iterate(const Eigen::MatrixXd& c0,
                                                   const Eigen::MatrixXd& h,
                                                   const Eigen::MatrixXd& gamma,
                                                   int imax);

// Infinite-iteration limits of the mean-field dynamics for a fixed set of
// per-particle observations:
//   state particle j ->  P v*^(j) + S v_0^(j),
//   observed particle j ->  calP y^(j) + calS H v_0^(j),
// with the corresponding limit means and covariances.
struct MeanFieldLimits {
  StateSpectral state;
  ObsSpectral obs;

  Eigen::MatrixXd rls_solutions;  // d x J, columns v*^(j) = H^+ y^(j)
  Eigen::VectorXd rls_solution;   // H^+ y for the unperturbed data

  Eigen::MatrixXd state_particles;  // d x J limits
  Eigen::VectorXd state_mean;       // P H^+ y + S mu_0
  Eigen::MatrixXd state_cov;        // P (H^T G^-1 H)^dag P^T + S C_0 S^T

  Eigen::MatrixXd obs_particles;  // n x J limits
  Eigen::VectorXd obs_mean;       // calP y + calS H mu_0
  Eigen::MatrixXd obs_cov;        // calP Gamma calP^T + calS H C_0 H^T calS^T
};

// mean0/cov0 default to the sample statistics of `initial`; pass explicit
// values to analyze the idealized prior instead of the realized ensemble.
// The data must use fixed perturbations (the limits do not exist under
// per-iteration redraws) and the operator must be linear.
MeanFieldLimits mean_field_limits(
    const InverseProblem& problem, const Ensemble& initial,
    const PerturbedData& data,
    const std::optional<Eigen::VectorXd>& mean0 = std::nullopt,
    const std::optional<Eigen::MatrixXd>& cov0 = std::nullopt);

// Projected residual/misfit diagnostics over iterations. For each recorded
// iteration i the per-particle norms track the two-sided split
//   |P (v_i^(j) - v*^(j))|, |S (v_i^(j) - v*^(j))|   (state residual)
//   |calP (h_i^(j) - y^(j))|, |calS (h_i^(j) - y^(j))|  (data misfit)
// and the aggregate series are the relative ensemble/covariance errors
// against the mean-field limits: mean_j |Proj(x_i - x_inf)^(j)| / |Proj
// x_inf^(j)| and |Cov[Proj(x_i - x_inf)]| / |Cov[Proj x_inf]| (spectral
// norms). Ratios with zero denominators are recorded as NaN.
struct ProjectedSeries {
  std::vector<int> iterations;

  std::vector<Eigen::VectorXd> state_p_norms;
  std::vector<Eigen::VectorXd> state_s_norms;
  std::vector<Eigen::VectorXd> obs_p_norms;
  std::vector<Eigen::VectorXd> obs_s_norms;

  std::vector<double> state_p_mean_rel, state_s_mean_rel;
  std::vector<double> obs_p_mean_rel, obs_s_mean_rel;
  std::vector<double> state_p_cov_rel, state_s_cov_rel;
  std::vector<double> obs_p_cov_rel, obs_s_cov_rel;
};

// Streams ProjectedSeries entries one recorded iteration at a time — for
// example from a StepObserver during run() — without retaining particle
// snapshots. The referenced limits and perturbed data must outlive the
// accumulator. `keep_particle_norms` controls whether the per-particle norm
// vectors are stored alongside the aggregate series (they cost 4 J doubles
// per appended iteration).
class ProjectedSeriesAccumulator {
 public:
  ProjectedSeriesAccumulator(const MeanFieldLimits& limits,
                             const Eigen::MatrixXd& perturbed_data,
                             bool keep_particle_norms = true);

  void append(int iteration, const Eigen::MatrixXd& particles,
              const Eigen::MatrixXd& forward_values);

  const ProjectedSeries& series() const { return series_; }
  ProjectedSeries take() { return std::move(series_); }

 private:
  const MeanFieldLimits& limits_;
  const Eigen::MatrixXd& perturbed_;
  bool keep_particle_norms_;

  Eigen::VectorXd state_p_den_, state_s_den_;  // per-particle |Proj x_inf|
  Eigen::VectorXd obs_p_den_, obs_s_den_;
  double state_p_cov_den_ = 0.0, state_s_cov_den_ = 0.0;
  double obs_p_cov_den_ = 0.0, obs_s_cov_den_ = 0.0;

  ProjectedSeries series_;
};

// Evaluates the diagnostics on the mean-field trajectory generated by the
// covariance-iteration states: particle j at iteration i is
// v*^(j) + state_map_i (v_0^(j) - v*^(j)).
ProjectedSeries projected_residual_series(
    const std::vector<MeanFieldState>& states, const InverseProblem& problem,
    const Eigen::MatrixXd& initial_particles, const PerturbedData& data,
    const MeanFieldLimits& limits);

// Evaluates the diagnostics on an actual run; uses the trace records that
// carry particle snapshots (at least one is required).
ProjectedSeries projected_residual_series(const RunTrace& trace,
                                          const InverseProblem& problem,
                                          const MeanFieldLimits& limits);

// One row per retained eigenvalue: index, gamma_l, then the recurrence
// lambda_{l,0..imax} seeded at that eigenvalue.
void export_spectral_csv(const Eigen::VectorXd& eigenvalues, int imax,
                         const std::string& csv_path);

}  // namespace ekrmle
