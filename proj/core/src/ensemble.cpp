#include "ekrmle/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "ekrmle/csv.hpp"
#include "ekrmle/linalg.hpp"
#include "ekrmle/matrix_market.hpp"

namespace ekrmle {
namespace {

void require_ensemble(const Ensemble& ensemble) {
  if (ensemble.size() < 2)
    throw PreconditionError("ensemble must hold at least two particles");
}

// Returns the index of the first column containing a non-finite entry, or -1.
Eigen::Index first_bad_column(const Eigen::MatrixXd& m) {
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    if (!m.col(j).allFinite()) return j;
  return -1;
}

struct StepWork {
  Ensemble next;
  double max_rel_change = 0.0;
};

StepWork step_with_forward(const InverseProblem& problem,
                           const Ensemble& ensemble,
                           const PerturbedData& data,
                           const Eigen::MatrixXd& forward_values) {
  require_ensemble(ensemble);
  const Eigen::Index n = problem.obs_dim();
  const Eigen::Index J = ensemble.size();
  if (ensemble.dim() != problem.state_dim())
    throw ShapeError("eki step: particles have dimension " +
                     std::to_string(ensemble.dim()) + ", operator domain is " +
                     std::to_string(problem.state_dim()));
  if (data.perturbed.rows() != n || data.perturbed.cols() != J)
    throw ShapeError("eki step: perturbed data must be " + std::to_string(n) +
                     "x" + std::to_string(J));
  if (forward_values.rows() != n || forward_values.cols() != J)
    throw ShapeError("eki step: forward values must be " + std::to_string(n) +
                     "x" + std::to_string(J));

  const Eigen::VectorXd mean_v = sample_mean(ensemble.particles);
  const Eigen::VectorXd mean_h = sample_mean(forward_values);
  const Eigen::MatrixXd anomalies_v = ensemble.particles.colwise() - mean_v;
  const Eigen::MatrixXd anomalies_h = forward_values.colwise() - mean_h;
  const double scale = 1.0 / static_cast<double>(J - 1);

  Eigen::MatrixXd chh = Eigen::MatrixXd::Zero(n, n);
  chh.selfadjointView<Eigen::Lower>().rankUpdate(anomalies_h, scale);
  chh = chh.selfadjointView<Eigen::Lower>();
  const Eigen::MatrixXd cvh = scale * (anomalies_v * anomalies_h.transpose());

  Eigen::MatrixXd bracket = chh + problem.noise_cov;
  bracket = 0.5 * (bracket + bracket.transpose()).eval();
  Eigen::LLT<Eigen::MatrixXd> llt(bracket);
  if (llt.info() != Eigen::Success)
    throw NumericalError(
        "eki step: factorization of (Cov[h] + noise covariance) failed");

  // v^(j) += Cvh (Chh + Gamma)^-1 (y^(j) - h^(j)), without forming the
  // d x d state covariance.
  const Eigen::MatrixXd innovations =
      llt.solve(data.perturbed - forward_values);

  StepWork work;
  work.next.particles = ensemble.particles + cvh * innovations;
  work.next.iteration = ensemble.iteration + 1;
  for (Eigen::Index j = 0; j < J; ++j) {
    const double denom = ensemble.particles.col(j).norm() + 1e-30;
    const double change =
        (work.next.particles.col(j) - ensemble.particles.col(j)).norm();
    work.max_rel_change = std::max(work.max_rel_change, change / denom);
  }
  return work;
}

}  // namespace

std::string to_string(PerturbationVariant variant) {
  switch (variant) {
    case PerturbationVariant::Deterministic:
      return "deterministic";
    case PerturbationVariant::PerIteration:
      return "per-iteration";
    case PerturbationVariant::FixedRmle:
      return "fixed-rmle";
  }
  return "unknown";
}

std::optional<PerturbationVariant> variant_from_string(
    const std::string& name) {
  if (name == "deterministic") return PerturbationVariant::Deterministic;
  if (name == "per-iteration") return PerturbationVariant::PerIteration;
  if (name == "fixed-rmle") return PerturbationVariant::FixedRmle;
  return std::nullopt;
}

PerturbationScheme PerturbationScheme::deterministic() {
  return PerturbationScheme{PerturbationVariant::Deterministic, {}};
}

PerturbationScheme PerturbationScheme::per_iteration(Eigen::MatrixXd sigma) {
  return PerturbationScheme{PerturbationVariant::PerIteration,
                            std::move(sigma)};
}

PerturbationScheme PerturbationScheme::fixed_rmle(Eigen::MatrixXd sigma) {
  return PerturbationScheme{PerturbationVariant::FixedRmle, std::move(sigma)};
}

PerturbedData PerturbedData::exact(const Eigen::VectorXd& y,
                                   Eigen::Index ensemble_size) {
  PerturbedData data;
  data.perturbed = y.replicate(1, ensemble_size);
  data.draws = Eigen::MatrixXd::Zero(y.size(), ensemble_size);
  data.variant = PerturbationVariant::Deterministic;
  return data;
}

DivergenceError::DivergenceError(int iteration, Eigen::Index particle)
    : NumericalError("forward evaluation diverged at iteration " +
                     std::to_string(iteration) + ", particle " +
                     std::to_string(particle)),
      iteration_(iteration),
      particle_(particle) {}

Eigen::VectorXd sample_mean(const Eigen::MatrixXd& a) {
  if (a.cols() < 1)
    throw PreconditionError("sample mean requires at least one column");
  return a.rowwise().mean();
}

Eigen::MatrixXd sample_cov(const Eigen::MatrixXd& a) {
  if (a.cols() < 2)
    throw PreconditionError("sample covariance requires at least two columns");
  const Eigen::MatrixXd anomalies = a.colwise() - sample_mean(a).eval();
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(a.rows(), a.rows());
  cov.selfadjointView<Eigen::Lower>().rankUpdate(
      anomalies, 1.0 / static_cast<double>(a.cols() - 1));
  cov = cov.selfadjointView<Eigen::Lower>();
  return cov;
}

Eigen::MatrixXd sample_cov(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.cols() != b.cols())
    throw ShapeError("sample covariance: column counts differ (" +
                     std::to_string(a.cols()) + " vs " +
                     std::to_string(b.cols()) + ")");
  if (a.cols() < 2)
    throw PreconditionError("sample covariance requires at least two columns");
  const Eigen::MatrixXd anomalies_a = a.colwise() - sample_mean(a).eval();
  const Eigen::MatrixXd anomalies_b = b.colwise() - sample_mean(b).eval();
  return (anomalies_a * anomalies_b.transpose()) /
         static_cast<double>(a.cols() - 1);
}

Eigen::MatrixXd kalman_gain(const Eigen::MatrixXd& cvh,
                            const Eigen::MatrixXd& chh,
                            const Eigen::MatrixXd& gamma) {
  if (chh.rows() != chh.cols() || gamma.rows() != gamma.cols() ||
      chh.rows() != gamma.rows() || cvh.cols() != chh.rows())
    throw ShapeError("kalman gain: inconsistent dimensions");
  Eigen::MatrixXd bracket = chh + gamma;
  bracket = 0.5 * (bracket + bracket.transpose()).eval();
  Eigen::LLT<Eigen::MatrixXd> llt(bracket);
  if (llt.info() != Eigen::Success)
    throw NumericalError(
        "kalman gain: factorization of (Cov[h] + noise covariance) failed");
  return llt.solve(cvh.transpose()).transpose();
}

PerturbedData perturb_observations(const Eigen::VectorXd& y,
                                   const PerturbationScheme& scheme,
                                   Eigen::Index ensemble_size,
                                   const StreamKey& key, int iteration) {
  if (ensemble_size < 2)
    throw PreconditionError("perturbation requires at least two particles");
  const Eigen::Index n = y.size();
  PerturbedData data;
  data.variant = scheme.variant;
  if (scheme.variant == PerturbationVariant::Deterministic ||
      scheme.sigma.size() == 0 || scheme.sigma.isZero(0.0)) {
    data.perturbed = y.replicate(1, ensemble_size);
    data.draws = Eigen::MatrixXd::Zero(n, ensemble_size);
    return data;
  }
  if (scheme.sigma.rows() != n || scheme.sigma.cols() != n)
    throw ShapeError("perturbation covariance must be " + std::to_string(n) +
                     "x" + std::to_string(n));
  const Eigen::MatrixXd factor =
      psd_sqrt(scheme.sigma, "perturbation covariance");
  data.perturbed.resize(n, ensemble_size);
  data.draws.resize(n, ensemble_size);
  const int draw_iteration =
      scheme.variant == PerturbationVariant::FixedRmle ? 0 : iteration;
  for (Eigen::Index j = 0; j < ensemble_size; ++j) {
    RandomStream stream =
        key.stream(stream_tag::kPerturbation, static_cast<std::uint64_t>(j),
                   static_cast<std::uint64_t>(draw_iteration));
    data.draws.col(j) = factor * stream.normal_vector(n);
    data.perturbed.col(j) = y + data.draws.col(j);
  }
  return data;
}

Ensemble initial_ensemble(const GaussianPrior& prior,
                          Eigen::Index ensemble_size, const StreamKey& key) {
  if (ensemble_size < 2)
    throw PreconditionError("ensemble must hold at least two particles");
  const Eigen::Index d = prior.mean.size();
  if (prior.cov.rows() != d || prior.cov.cols() != d)
    throw ShapeError("initial ensemble: prior covariance must be " +
                     std::to_string(d) + "x" + std::to_string(d));
  const Eigen::MatrixXd factor = psd_sqrt(prior.cov, "prior covariance");
  Ensemble ensemble;
  ensemble.particles.resize(d, ensemble_size);
  for (Eigen::Index j = 0; j < ensemble_size; ++j) {
    RandomStream stream = key.stream(stream_tag::kInitialEnsemble,
                                     static_cast<std::uint64_t>(j), 0);
    ensemble.particles.col(j) = prior.mean + factor * stream.normal_vector(d);
  }
  return ensemble;
}

Ensemble initial_ensemble(Eigen::MatrixXd particles) {
  if (particles.cols() < 2)
    throw PreconditionError("ensemble must hold at least two particles");
  if (!particles.allFinite())
    throw PreconditionError("ensemble particles must be finite");
  Ensemble ensemble;
  ensemble.particles = std::move(particles);
  return ensemble;
}

Ensemble eki_step(const InverseProblem& problem, const Ensemble& ensemble,
                  const PerturbedData& data) {
  require_ensemble(ensemble);
  const Eigen::MatrixXd forward_values =
      problem.op.apply_batch(ensemble.particles);
  const Eigen::Index bad = first_bad_column(forward_values);
  if (bad >= 0) throw DivergenceError(ensemble.iteration, bad);
  return step_with_forward(problem, ensemble, data, forward_values).next;
}

Ensemble eki_step_with_forward(const InverseProblem& problem,
                               const Ensemble& ensemble,
                               const PerturbedData& data,
                               const Eigen::MatrixXd& forward_values) {
  return step_with_forward(problem, ensemble, data, forward_values).next;
}

RunTrace run(const InverseProblem& problem, const Ensemble& init,
             const PerturbationScheme& scheme, const StoppingRule& stop,
             const StreamKey& key, const TraceOptions& options,
             const StepObserver& observer) {
  validate(problem);
  require_ensemble(init);
  if (init.dim() != problem.state_dim())
    throw ShapeError("run: particles have dimension " +
                     std::to_string(init.dim()) + ", operator domain is " +
                     std::to_string(problem.state_dim()));

  RunTrace trace;
  Ensemble current = init;
  PerturbedData data =
      perturb_observations(problem.data, scheme, init.size(), key, 0);

  const auto snapshot_wanted = [&options](int iteration) {
    return std::find(options.snapshot_iterations.begin(),
                     options.snapshot_iterations.end(),
                     iteration) != options.snapshot_iterations.end();
  };

  bool tolerance_fired = false;
  for (int i = 0;; ++i) {
    const Eigen::MatrixXd forward_values =
        problem.op.apply_batch(current.particles);
    const Eigen::Index bad = first_bad_column(forward_values);
    if (bad >= 0) {
      DivergenceError err(current.iteration, bad);
      trace.final_ensemble = current;
      trace.data = data;
      err.attach_trace(std::make_shared<const RunTrace>(std::move(trace)));
      throw err;
    }

    if (scheme.variant == PerturbationVariant::PerIteration && i > 0)
      data = perturb_observations(problem.data, scheme, init.size(), key, i);

    IterationRecord record;
    record.iteration = current.iteration;
    record.mean = sample_mean(current.particles);
    if (options.record_covariances)
      record.covariance = sample_cov(current.particles);
    if (options.record_misfits)
      record.misfit = forward_values - data.perturbed;
    if (snapshot_wanted(current.iteration)) record.particles = current.particles;
    trace.records.push_back(std::move(record));

    if (observer) observer(current, forward_values);
    if (i >= stop.max_iterations || tolerance_fired) break;

    StepWork work = step_with_forward(problem, current, data, forward_values);
    current = std::move(work.next);
    trace.iterations_completed = i + 1;
    if (stop.rel_step_tol > 0.0 && work.max_rel_change < stop.rel_step_tol)
      tolerance_fired = true;
  }

  trace.final_ensemble = std::move(current);
  trace.data = std::move(data);
  trace.stopped_early =
      tolerance_fired && trace.iterations_completed < stop.max_iterations;
  return trace;
}

void export_trace_csv(const RunTrace& trace, const std::string& csv_path) {
  CsvWriter writer(csv_path, {"iteration", "stat_name", "index", "value"});
  const auto emit = [&writer](int iteration, const char* name,
                              const double* values, Eigen::Index count) {
    for (Eigen::Index k = 0; k < count; ++k) {
      writer.cell(static_cast<std::int64_t>(iteration));
      writer.cell(name);
      writer.cell(static_cast<std::int64_t>(k));
      writer.cell(values[k]);
      writer.end_row();
    }
  };

  const std::filesystem::path directory =
      std::filesystem::path(csv_path).parent_path();
  for (const IterationRecord& record : trace.records) {
    emit(record.iteration, "mean", record.mean.data(), record.mean.size());
    if (record.covariance.size() > 0)
      emit(record.iteration, "covariance", record.covariance.data(),
           record.covariance.size());
    if (record.misfit.size() > 0)
      emit(record.iteration, "misfit", record.misfit.data(),
           record.misfit.size());
    if (record.particles) {
      const std::filesystem::path snapshot =
          directory / ("particles_i" + std::to_string(record.iteration) +
                       ".mtx");
      write_matrix_market(snapshot.string(), *record.particles);
    }
  }
  writer.close();
}

}  // namespace ekrmle
