#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ekrmle/balanced_truncation.hpp"
#include "ekrmle/ensemble.hpp"
#include "ekrmle/inverse_problem.hpp"
#include "ekrmle/kv_config.hpp"
#include "ekrmle/lti.hpp"
#include "ekrmle/mean_field.hpp"
#include "ekrmle/rng.hpp"

namespace ekrmle {

// Every knob of the two built-in experiments, serializable to and from a flat
// key-value file. Field defaults are the desk-scale convergence settings; use
// smoothing_defaults() as the base for the smoothing experiment. The key for
// each field is the field name, except output_dir whose key is `out_dir`.
struct ExperimentConfig {
  std::string experiment = "random-convergence";  // or "heat-smoothing"

  // Randomized-operator study dimensions; for the smoothing experiment `d`
  // is the state dimension of the dynamics.
  Eigen::Index n = 50;
  Eigen::Index d = 100;
  Eigen::Index rank = 25;

  std::vector<Eigen::Index> ensemble_sizes = {10, 5000};
  std::vector<Eigen::Index> reduced_orders = {3, 5, 10, 20};
  bool include_full = true;  // also run the unreduced forward map

  int max_iterations = 100;
  // Early-stop tolerance on the largest relative particle step; <= 0 keeps
  // iterating to max_iterations (required for full-length error series).
  double rel_step_tol = 0.0;
  int replicates = 30;

  std::optional<std::uint64_t> seed;  // mandatory before running
  std::string output_dir = ".";
  PerturbationVariant scheme = PerturbationVariant::FixedRmle;
  bool plots = true;

  // Smoothing dynamics. Empty a_file selects the built-in heat rod; a
  // user-supplied system needs both a_file and f_file (Matrix Market).
  std::string a_file;
  std::string f_file;
  double alpha = 0.0;  // heat diffusivity; 0 calibrates the slowest decay
  double sensor_frac = 2.0 / 3.0;
  double dt = 1e-3;
  double t_final = 10.0;
  int num_obs = 100;
  // Observation noise stddev; <= 0 calibrates to 10% of the peak absolute
  // noiseless output for the drawn truth.
  double sigma_obs = 0.008;
  // Ensembles beyond 200k particles need multi-gigabyte buffers at d=200;
  // they stay rejected unless explicitly enabled.
  bool allow_large_ensembles = false;

  static ExperimentConfig convergence_defaults();
  static ExperimentConfig smoothing_defaults();

  // Overlays the file's keys onto the defaults selected by its `experiment`
  // key; unknown keys are rejected.
  static ExperimentConfig from_config(const KeyValueConfig& kv);
  KeyValueConfig to_config() const;

  // Throws PreconditionError on out-of-range sizes or a missing seed.
  void validate() const;

  bool operator==(const ExperimentConfig&) const = default;
};

// A linear problem with randomized ingredients: H = U diag(s) V^T with
// orthonormal U (n x rank), V (d x rank) and log-uniform singular values in
// [0.1, 10]; noise covariance G G^T + 0.1 I with G of i.i.d. N(0, 1/n)
// entries; data H truth + noise. The stored prior is N(0, C0) with C0 of
// rank min(d-1, rank + ceil(rank/2)), rescaled so the smallest retained
// eigenvalue of C0 H^T Gamma^-1 H equals `min_eigenvalue` — that eigenvalue
// sets the slowest contraction rate, so pinning it keeps convergence studies
// comparable across draws. Requires 1 <= rank < min(n, d), which leaves both
// kernels of H nontrivial.
struct RandomProblem {
  InverseProblem problem;  // operator, noise, data, and the N(0, C0) prior
  Eigen::VectorXd truth;
  Eigen::Index operator_rank = 0;
};

RandomProblem random_problem(Eigen::Index n, Eigen::Index d, Eigen::Index rank,
                             const StreamKey& key,
                             double min_eigenvalue = 0.35);

// Subspace tags for the projected error series: the convergent subspaces are
// driven to the weighted least-squares solutions, the frozen ones keep their
// initial content forever.
enum class SubspaceTag {
  StateConvergent,
  StateFrozen,
  ObsConvergent,
  ObsFrozen,
};
enum class StatisticTag { MeanError, CovError };

std::string to_string(SubspaceTag tag);    // state_p / state_s / obs_p / obs_s
std::string to_string(StatisticTag tag);   // mean-error / cov-error

// One labeled scalar series, e.g. the replicate-mean relative ensemble error
// in the convergent state subspace at ensemble size J over iterations
// 0..max_iterations.
struct MetricSeries {
  SubspaceTag subspace = SubspaceTag::StateConvergent;
  StatisticTag statistic = StatisticTag::MeanError;
  Eigen::Index ensemble_size = 0;
  std::vector<double> values;
};

struct ConvergenceReplicate {
  Eigen::Index ensemble_size = 0;
  int replicate = 0;
  // Aggregate series only; the per-particle norm vectors are dropped to keep
  // 30-replicate sweeps small.
  ProjectedSeries series;
};

struct ConvergenceResult {
  std::vector<MetricSeries> aggregated;  // replicate means, 8 per ensemble size
  std::vector<ConvergenceReplicate> runs;
  std::filesystem::path means_csv;
  std::filesystem::path covs_csv;
};

// Runs the randomized-operator convergence study: per replicate a fresh
// random problem, initial ensemble, and per-particle data; the iterates are
// compared against their infinite-iteration limits through the projected
// relative error series, streamed without particle snapshots. Writes
// means.csv and covs.csv (columns ensemble_size, subspace, iteration, value)
// plus log-scale line charts unless plots are disabled.
ConvergenceResult convergence_experiment(const ExperimentConfig& config);

// Relative posterior-moment errors: the mean error is measured in the norm
// weighted by the inverse reference covariance (evaluated via triangular
// solves with its Cholesky factor), the covariance error in spectral norm.
struct PosteriorErrors {
  double mean_error = 0.0;
  double cov_error = 0.0;
};

PosteriorErrors posterior_error_metrics(const Eigen::VectorXd& mean,
                                        const Eigen::MatrixXd& cov,
                                        const GaussianPosterior& reference);
PosteriorErrors posterior_error_metrics(const Ensemble& ensemble,
                                        const GaussianPosterior& reference);

// Everything fixed across the cells of a smoothing study: the dynamics, its
// dense stacked forward map, the steady-state prior, one truth/data draw,
// and the exact posterior they induce.
struct SmoothingSetup {
  LTISystem system;
  Eigen::MatrixXd forward;    // stacked observation map, dense
  Eigen::MatrixXd noise_cov;  // block-diagonal stacked noise covariance
  Eigen::MatrixXd prior_cov;  // steady-state covariance of the dynamics
  Eigen::VectorXd truth;
  Eigen::VectorXd data;
  GaussianPosterior posterior;
  InverseProblem problem;  // forward/noise/data with the N(0, prior_cov) prior
};

SmoothingSetup smoothing_setup(const LTISystem& system, const StreamKey& key);

// The system described by the config: the heat rod by default, or A and F
// read from Matrix Market files with equally spaced observation times and
// isotropic output noise. A non-positive sigma_obs yields a placeholder unit
// noise here; smoothing_experiment recalibrates it from the drawn truth.
LTISystem system_from_config(const ExperimentConfig& config);

// Noise stddev equal to `fraction` of the peak absolute noiseless output.
double calibrated_obs_sigma(const LTISystem& system,
                            const Eigen::VectorXd& truth,
                            double fraction = 0.1);

// One (forward variant, ensemble size) cell of the smoothing study.
struct SmoothingCell {
  std::string forward_label;  // "full" or "rho=<k>"
  Eigen::Index rho = 0;       // 0 for the full-order forward
  Eigen::Index ensemble_size = 0;
  std::vector<double> mean_errors;  // per replicate; NaN where a run failed
  std::vector<double> cov_errors;
  double mean_error = 0.0;  // means over the successful replicates
  double cov_error = 0.0;
  int replicates_ok = 0;
  std::string status = "ok";  // first failure message otherwise
};

struct SmoothingResult {
  SmoothingSetup setup;
  std::vector<Eigen::Index> orders;
  std::vector<double> exact_mean_errors;  // reduced-posterior vs full, per order
  std::vector<double> exact_cov_errors;
  std::vector<std::string> exact_status;
  std::vector<SmoothingCell> cells;
  std::filesystem::path errs_vs_j_csv;
  std::filesystem::path errs_vs_rho_csv;
};

// Runs the model-reduction smoothing study: exact reduced-posterior errors
// per retained order, then randomized-objective ensemble runs on the
// prior-augmented least-squares problem for every (forward variant, ensemble
// size, replicate) cell, each scored against the full exact posterior.
// Failed cells are recorded and the sweep continues. Writes errs_vs_J.csv,
// errs_vs_rho.csv, and four log-scale charts unless plots are disabled.
SmoothingResult smoothing_experiment(const ExperimentConfig& config);

}  // namespace ekrmle
