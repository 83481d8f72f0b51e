#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ekrmle/errors.hpp"
#include "ekrmle/inverse_problem.hpp"
#include "ekrmle/rng.hpp"

namespace ekrmle {

// A particle collection: column j of `particles` is the j-th member v^(j).
// Sample statistics use the unbiased 1/(J-1) normalization throughout, so
// J >= 2 is required everywhere an Ensemble is consumed.
struct Ensemble {
  Eigen::MatrixXd particles;  // d x J
  int iteration = 0;

  Eigen::Index dim() const { return particles.rows(); }
  Eigen::Index size() const { return particles.cols(); }
};

enum class PerturbationVariant {
  // All particles see the unperturbed data y at every iteration.
  Deterministic,
  // Fresh draws eps^(j) ~ N(0, Sigma) at every iteration.
  PerIteration,
  // Draws made once per run and then held fixed, giving each particle its
  // own randomized objective y^(j) = y + eps^(j).
  FixedRmle,
};

std::string to_string(PerturbationVariant variant);
// Inverse of to_string; empty for unrecognized names.
std::optional<PerturbationVariant> variant_from_string(const std::string& name);

struct PerturbationScheme {
  PerturbationVariant variant = PerturbationVariant::Deterministic;
  Eigen::MatrixXd sigma;  // n x n symmetric PSD; ignored for Deterministic

  static PerturbationScheme deterministic();
  static PerturbationScheme per_iteration(Eigen::MatrixXd sigma);
  static PerturbationScheme fixed_rmle(Eigen::MatrixXd sigma);
};

// Per-particle observations. Column j of `perturbed` is y^(j) = y + eps^(j);
// `draws` holds the eps^(j) actually sampled (zero for the deterministic
// scheme).
struct PerturbedData {
  Eigen::MatrixXd perturbed;  // n x J
  Eigen::MatrixXd draws;      // n x J
  PerturbationVariant variant = PerturbationVariant::Deterministic;

  // Every column equals y, no noise drawn.
  static PerturbedData exact(const Eigen::VectorXd& y, Eigen::Index ensemble_size);
};

struct IterationRecord {
  int iteration = 0;
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;           // empty when not recorded
  Eigen::MatrixXd misfit;               // columns H v^(j) - y^(j); empty when not recorded
  std::optional<Eigen::MatrixXd> particles;  // snapshot, when requested
};

struct StoppingRule {
  // Hard iteration cap; 0 means "record the initial state and stop".
  int max_iterations = 100;
  // Also stop once max_j |v_{i+1}^(j) - v_i^(j)| / (|v_i^(j)| + 1e-30)
  // falls below this; <= 0 disables the check.
  double rel_step_tol = 1e-10;
};

struct TraceOptions {
  bool record_covariances = true;
  bool record_misfits = true;
  // Iterations at which full particle snapshots are kept.
  std::vector<int> snapshot_iterations;
};

struct RunTrace {
  std::vector<IterationRecord> records;  // size = iterations_completed + 1
  Ensemble final_ensemble;
  PerturbedData data;  // the per-particle observations last in effect
  int iterations_completed = 0;
  bool stopped_early = false;  // true when the step tolerance fired first
};

// Thrown when a forward evaluation produces non-finite values. When raised
// from run() the trace accumulated so far is attached.
class DivergenceError : public NumericalError {
 public:
  DivergenceError(int iteration, Eigen::Index particle);

  int iteration() const { return iteration_; }
  Eigen::Index particle() const { return particle_; }
  const std::shared_ptr<const RunTrace>& partial_trace() const {
    return trace_;
  }
  void attach_trace(std::shared_ptr<const RunTrace> trace) {
    trace_ = std::move(trace);
  }

 private:
  int iteration_;
  Eigen::Index particle_;
  std::shared_ptr<const RunTrace> trace_;
};

// Column-wise sample statistics.
Eigen::VectorXd sample_mean(const Eigen::MatrixXd& a);
// Self covariance (J-1 normalization), exactly symmetric by construction.
Eigen::MatrixXd sample_cov(const Eigen::MatrixXd& a);
// Cross covariance (J-1)^-1 sum_j (a_j - abar)(b_j - bbar)^T.
Eigen::MatrixXd sample_cov(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

// K = Cvh (Chh + gamma)^-1 via Cholesky of the symmetrized bracket.
Eigen::MatrixXd kalman_gain(const Eigen::MatrixXd& cvh,
                            const Eigen::MatrixXd& chh,
                            const Eigen::MatrixXd& gamma);

// Draws per-particle observations for one iteration. Particle j uses the
// substream (seed, replicate, perturbation-tag, j, iteration), so results do
// not depend on evaluation order; the fixed-rmle scheme is drawn once with
// iteration = 0 and reused.
PerturbedData perturb_observations(const Eigen::VectorXd& y,
                                   const PerturbationScheme& scheme,
                                   Eigen::Index ensemble_size,
                                   const StreamKey& key, int iteration = 0);

// I.i.d. prior draws mu + C^{1/2} z, or pass-through of explicit particles.
Ensemble initial_ensemble(const GaussianPrior& prior, Eigen::Index ensemble_size,
                          const StreamKey& key);
Ensemble initial_ensemble(Eigen::MatrixXd particles);

// One update v^(j) <- v^(j) + K (y^(j) - h^(j)) with K built from the
// ensemble's sample covariances; the iteration counter increments. The
// second form reuses already-computed forward values h^(j) (columns of
// `forward_values`) and is what run() calls internally.
Ensemble eki_step(const InverseProblem& problem, const Ensemble& ensemble,
                  const PerturbedData& data);
Ensemble eki_step_with_forward(const InverseProblem& problem,
                               const Ensemble& ensemble,
                               const PerturbedData& data,
                               const Eigen::MatrixXd& forward_values);

// Called once per recorded iteration with the current ensemble and its
// forward values (one column per particle).
using StepObserver =
    std::function<void(const Ensemble&, const Eigen::MatrixXd& forward_values)>;

// Iterates eki_step until the stopping rule fires. The trace includes the
// initial state, so records.size() == iterations_completed + 1.
RunTrace run(const InverseProblem& problem, const Ensemble& init,
             const PerturbationScheme& scheme, const StoppingRule& stop,
             const StreamKey& key, const TraceOptions& options = {},
             const StepObserver& observer = nullptr);

// CSV with columns (iteration, stat_name, index, value); matrix entries use
// column-major linear indices. Particle snapshots are written next to the
// CSV as particles_i<iter>.mtx.
void export_trace_csv(const RunTrace& trace, const std::string& csv_path);

}  // namespace ekrmle
