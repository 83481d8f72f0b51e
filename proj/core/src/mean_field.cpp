#include "ekrmle/mean_field.hpp"

#include <cmath>
#include <limits>

#include <Eigen/Eigenvalues>

#include "ekrmle/csv.hpp"
#include "ekrmle/errors.hpp"
#include "ekrmle/linalg.hpp"

namespace ekrmle {
namespace {

struct WhitenedEigen {
  Eigen::LLT<Eigen::MatrixXd> gamma_llt;
  Eigen::MatrixXd whitened_h;   // L^-1 H
  Eigen::VectorXd eigenvalues;  // retained, non-increasing
  Eigen::MatrixXd vectors;      // n x r, orthonormal whitened eigenvectors
};

// Solves the symmetric whitened problem (L^-1 H C0 H^T L^-T) q = lambda q
// and keeps the eigenpairs above the rank tolerance.
WhitenedEigen whitened_eigenproblem(const Eigen::MatrixXd& c0,
                                    const Eigen::MatrixXd& h,
                                    const Eigen::MatrixXd& gamma,
                                    double rank_tol) {
  const Eigen::Index n = h.rows();
  const Eigen::Index d = h.cols();
  if (c0.rows() != d || c0.cols() != d)
    throw ShapeError("eigenproblem: covariance must be " + std::to_string(d) +
                     "x" + std::to_string(d));
  require_symmetric(c0, "eigenproblem: covariance");
  if (gamma.rows() != n || gamma.cols() != n)
    throw ShapeError("eigenproblem: noise covariance must be " +
                     std::to_string(n) + "x" + std::to_string(n));

  WhitenedEigen out;
  out.gamma_llt = spd_cholesky(gamma, "eigenproblem: noise covariance");
  out.whitened_h = out.gamma_llt.matrixL().solve(h);
  Eigen::MatrixXd core =
      out.whitened_h * c0 * out.whitened_h.transpose();
  core = 0.5 * (core + core.transpose()).eval();

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(core);
  if (eig.info() != Eigen::Success)
    throw NumericalError("eigenproblem: eigendecomposition failed");

  // Eigen returns ascending order; flip to non-increasing.
  const Eigen::VectorXd values = eig.eigenvalues().reverse();
  const Eigen::MatrixXd vectors = eig.eigenvectors().rowwise().reverse();
  const double top = values.size() ? std::max(values(0), 0.0) : 0.0;
  Eigen::Index rank = 0;
  while (rank < values.size() && values(rank) > rank_tol * top &&
         values(rank) > 0.0)
    ++rank;
  out.eigenvalues = values.head(rank);
  out.vectors = vectors.leftCols(rank);
  return out;
}

double finite_ratio_mean(const Eigen::VectorXd& numerators,
                         const Eigen::VectorXd& denominators) {
  double sum = 0.0;
  Eigen::Index count = 0;
  for (Eigen::Index j = 0; j < numerators.size(); ++j) {
    if (denominators(j) > 0.0) {
      sum += numerators(j) / denominators(j);
      ++count;
    }
  }
  return count ? sum / static_cast<double>(count)
               : std::numeric_limits<double>::quiet_NaN();
}

double guarded_ratio(double numerator, double denominator) {
  return denominator > 0.0 ? numerator / denominator
                           : std::numeric_limits<double>::quiet_NaN();
}

}  // namespace

ProjectedSeriesAccumulator::ProjectedSeriesAccumulator(
    const MeanFieldLimits& limits, const Eigen::MatrixXd& perturbed_data,
    bool keep_particle_norms)
    : limits_(limits),
      perturbed_(perturbed_data),
      keep_particle_norms_(keep_particle_norms) {
  const Eigen::MatrixXd sp = limits_.state.projector * limits_.state_particles;
  const Eigen::MatrixXd ss = limits_.state.complement * limits_.state_particles;
  const Eigen::MatrixXd op = limits_.obs.projector * limits_.obs_particles;
  const Eigen::MatrixXd os = limits_.obs.complement * limits_.obs_particles;
  state_p_den_ = sp.colwise().norm();
  state_s_den_ = ss.colwise().norm();
  obs_p_den_ = op.colwise().norm();
  obs_s_den_ = os.colwise().norm();
  state_p_cov_den_ = spectral_norm(sample_cov(sp));
  state_s_cov_den_ = spectral_norm(sample_cov(ss));
  obs_p_cov_den_ = spectral_norm(sample_cov(op));
  obs_s_cov_den_ = spectral_norm(sample_cov(os));
}

void ProjectedSeriesAccumulator::append(int iteration,
                                        const Eigen::MatrixXd& particles,
                                        const Eigen::MatrixXd& forward_values) {
  const MeanFieldLimits& lim = limits_;
  if (particles.cols() != lim.rls_solutions.cols())
    throw PreconditionError(
        "projected series: ensemble size does not match the limits");
  series_.iterations.push_back(iteration);

  if (keep_particle_norms_) {
    const Eigen::MatrixXd residual = particles - lim.rls_solutions;
    const Eigen::MatrixXd misfit = forward_values - perturbed_;
    series_.state_p_norms.push_back(
        (lim.state.projector * residual).colwise().norm());
    series_.state_s_norms.push_back(
        (lim.state.complement * residual).colwise().norm());
    series_.obs_p_norms.push_back(
        (lim.obs.projector * misfit).colwise().norm());
    series_.obs_s_norms.push_back(
        (lim.obs.complement * misfit).colwise().norm());
  }

  const Eigen::MatrixXd state_diff_p =
      lim.state.projector * (particles - lim.state_particles);
  const Eigen::MatrixXd state_diff_s =
      lim.state.complement * (particles - lim.state_particles);
  const Eigen::MatrixXd obs_diff_p =
      lim.obs.projector * (forward_values - lim.obs_particles);
  const Eigen::MatrixXd obs_diff_s =
      lim.obs.complement * (forward_values - lim.obs_particles);

  series_.state_p_mean_rel.push_back(
      finite_ratio_mean(state_diff_p.colwise().norm(), state_p_den_));
  series_.state_s_mean_rel.push_back(
      finite_ratio_mean(state_diff_s.colwise().norm(), state_s_den_));
  series_.obs_p_mean_rel.push_back(
      finite_ratio_mean(obs_diff_p.colwise().norm(), obs_p_den_));
  series_.obs_s_mean_rel.push_back(
      finite_ratio_mean(obs_diff_s.colwise().norm(), obs_s_den_));

  series_.state_p_cov_rel.push_back(guarded_ratio(
      spectral_norm(sample_cov(state_diff_p)), state_p_cov_den_));
  series_.state_s_cov_rel.push_back(guarded_ratio(
      spectral_norm(sample_cov(state_diff_s)), state_s_cov_den_));
  series_.obs_p_cov_rel.push_back(
      guarded_ratio(spectral_norm(sample_cov(obs_diff_p)), obs_p_cov_den_));
  series_.obs_s_cov_rel.push_back(
      guarded_ratio(spectral_norm(sample_cov(obs_diff_s)), obs_s_cov_den_));
}

StateSpectral state_eigenproblem(const Eigen::MatrixXd& c0,
                                 const Eigen::MatrixXd& h,
                                 const Eigen::MatrixXd& gamma,
                                 double rank_tol) {
  const WhitenedEigen base = whitened_eigenproblem(c0, h, gamma, rank_tol);
  const Eigen::Index d = h.cols();

  StateSpectral out;
  out.eigenvalues = base.eigenvalues;
  out.rank = base.eigenvalues.size();
  // w = L^-T q, then u = lambda^-1 C0 H^T w; the normalization
  // U^T H^T Gamma^-1 H U = I is inherited from q^T q = I.
  const Eigen::MatrixXd w =
      base.gamma_llt.matrixL().transpose().solve(base.vectors);
  out.basis = c0 * (h.transpose() * w) *
              base.eigenvalues.cwiseInverse().asDiagonal();
  out.projector =
      out.basis * ((base.whitened_h * out.basis).transpose() * base.whitened_h);
  out.complement = Eigen::MatrixXd::Identity(d, d) - out.projector;
  return out;
}

ObsSpectral obs_eigenproblem(const Eigen::MatrixXd& c0,
                             const Eigen::MatrixXd& h,
                             const Eigen::MatrixXd& gamma, double rank_tol) {
  const WhitenedEigen base = whitened_eigenproblem(c0, h, gamma, rank_tol);
  const Eigen::Index n = h.rows();

  ObsSpectral out;
  out.eigenvalues = base.eigenvalues;
  out.rank = base.eigenvalues.size();
  out.basis = base.gamma_llt.matrixL().transpose().solve(base.vectors);
  out.projector = gamma * out.basis * out.basis.transpose();
  out.complement = Eigen::MatrixXd::Identity(n, n) - out.projector;
  return out;
}

EigenvalueSequence eigenvalue_recurrence(double lambda0, int imax) {
  if (lambda0 < 0.0)
    throw PreconditionError("eigenvalue recurrence requires lambda0 >= 0");
  if (imax < 0)
    throw PreconditionError("eigenvalue recurrence requires imax >= 0");
  EigenvalueSequence seq;
  seq.lambda.reserve(imax + 1);
  seq.complement.reserve(imax + 1);
  seq.lambda.push_back(lambda0);
  seq.complement.push_back(1.0 - lambda0);
  double product = 1.0 / (1.0 + lambda0);  // prod_{k<=i} (1+lambda_k)^-1
  for (int i = 1; i <= imax; ++i) {
    const double gap = product * (2.0 - (1.0 + lambda0) * product);
    seq.lambda.push_back(1.0 - gap);
    seq.complement.push_back(gap);
    product /= 2.0 - gap;  // multiply by (1 + lambda_i)^-1
  }
  return seq;
}

double rate_exponent(double lambda0) {
  if (lambda0 <= 0.0)
    throw PreconditionError("contraction rate requires lambda0 > 0");
  return lambda0 / (1.0 + 2.0 * lambda0);
}

double rate_bound(double lambda0, int i) {
  if (i < 1) throw PreconditionError("rate bound is stated for i >= 1");
  const double gamma = rate_exponent(lambda0);
  return 2.0 / (1.0 + 2.0 * lambda0) *
         std::exp(-static_cast<double>(i - 1) * gamma);
}

std::vector<MeanFieldState> mean_field_cov_iterate(const Eigen::MatrixXd& c0,
                                                   const Eigen::MatrixXd& h,
                                                   const Eigen::MatrixXd& gamma,
                                                   int imax) {
  const Eigen::Index n = h.rows();
  const Eigen::Index d = h.cols();
  if (c0.rows() != d || c0.cols() != d)
    throw ShapeError("covariance iteration: covariance must be " +
                     std::to_string(d) + "x" + std::to_string(d));
  require_symmetric(c0, "covariance iteration: covariance");
  if (imax < 0)
    throw PreconditionError("covariance iteration requires imax >= 0");
  const auto gamma_llt =
      spd_cholesky(gamma, "covariance iteration: noise covariance");

  const WeightedPseudoinverse pinv(h, gamma);
  const Eigen::MatrixXd normal = pinv.normal_matrix();
  const Eigen::MatrixXd normal_pinv = pinv.normal_pseudoinverse();
  const Eigen::MatrixXd identity_d = Eigen::MatrixXd::Identity(d, d);
  const Eigen::MatrixXd identity_n = Eigen::MatrixXd::Identity(n, n);

  std::vector<MeanFieldState> states;
  states.reserve(imax + 1);
  states.push_back({0, c0, identity_d, identity_n, {}});

  for (int i = 0; i < imax; ++i) {
    const MeanFieldState& current = states.back();
    MeanFieldState next;
    next.iteration = i + 1;

    // Per-step residual map (I + C_i H^T Gamma^-1 H)^-1, composed onto the
    // running products.
    const Eigen::MatrixXd step_state = identity_d + current.covariance * normal;
    Eigen::PartialPivLU<Eigen::MatrixXd> lu_state(step_state);
    if (lu_state.rcond() < 1e-12)
      next.warning = "state residual map solve is ill-conditioned";
    next.state_map = lu_state.solve(current.state_map);

    const Eigen::MatrixXd hch = h * current.covariance * h.transpose();
    // H C H^T Gamma^-1 = (Gamma^-1 H C H^T)^T because H C H^T is symmetric.
    const Eigen::MatrixXd step_obs =
        identity_n + gamma_llt.solve(hch).transpose();
    Eigen::PartialPivLU<Eigen::MatrixXd> lu_obs(step_obs);
    if (lu_obs.rcond() < 1e-12)
      next.warning = "observation misfit map solve is ill-conditioned";
    next.obs_map = lu_obs.solve(current.obs_map);

    const Eigen::MatrixXd settled = identity_d - next.state_map;
    next.covariance = next.state_map * c0 * next.state_map.transpose() +
                      settled * normal_pinv * settled.transpose();
    next.covariance =
        0.5 * (next.covariance + next.covariance.transpose()).eval();
    states.push_back(std::move(next));
  }
  return states;
}

MeanFieldLimits mean_field_limits(const InverseProblem& problem,
                                  const Ensemble& initial,
                                  const PerturbedData& data,
                                  const std::optional<Eigen::VectorXd>& mean0,
                                  const std::optional<Eigen::MatrixXd>& cov0) {
  validate(problem);
  if (data.variant == PerturbationVariant::PerIteration)
    throw PreconditionError(
        "mean-field limits require fixed per-particle observations");
  if (!problem.op.is_linear())
    throw UnsupportedOperatorError(
        "mean-field limits require a linear operator");
  const Eigen::Index n = problem.obs_dim();
  const Eigen::Index d = problem.state_dim();
  const Eigen::Index ensemble_size = initial.size();
  if (initial.dim() != d)
    throw ShapeError("mean-field limits: particles have dimension " +
                     std::to_string(initial.dim()) + ", expected " +
                     std::to_string(d));
  if (data.perturbed.rows() != n || data.perturbed.cols() != ensemble_size)
    throw ShapeError("mean-field limits: perturbed data must be " +
                     std::to_string(n) + "x" + std::to_string(ensemble_size));

  const Eigen::VectorXd mu0 =
      mean0 ? *mean0 : sample_mean(initial.particles).eval();
  const Eigen::MatrixXd c0 =
      cov0 ? *cov0 : sample_cov(initial.particles).eval();
  if (mu0.size() != d || c0.rows() != d || c0.cols() != d)
    throw ShapeError("mean-field limits: initial statistics have wrong shape");

  const Eigen::MatrixXd h = problem.op.materialize();
  const WeightedPseudoinverse pinv(h, problem.noise_cov);

  MeanFieldLimits limits;
  limits.state = state_eigenproblem(c0, h, problem.noise_cov);
  limits.obs = obs_eigenproblem(c0, h, problem.noise_cov);

  limits.rls_solutions = pinv.solve_batch(data.perturbed);
  limits.rls_solution = pinv.solve(problem.data);

  limits.state_particles = limits.state.projector * limits.rls_solutions +
                           limits.state.complement * initial.particles;
  limits.state_mean = limits.state.projector * limits.rls_solution +
                      limits.state.complement * mu0;
  limits.state_cov =
      limits.state.projector * pinv.normal_pseudoinverse() *
          limits.state.projector.transpose() +
      limits.state.complement * c0 * limits.state.complement.transpose();
  limits.state_cov =
      0.5 * (limits.state_cov + limits.state_cov.transpose()).eval();

  const Eigen::MatrixXd h0 = h * initial.particles;
  limits.obs_particles = limits.obs.projector * data.perturbed +
                         limits.obs.complement * h0;
  limits.obs_mean = limits.obs.projector * problem.data +
                    limits.obs.complement * (h * mu0);
  limits.obs_cov =
      limits.obs.projector * problem.noise_cov *
          limits.obs.projector.transpose() +
      limits.obs.complement * (h * c0 * h.transpose()) *
          limits.obs.complement.transpose();
  limits.obs_cov = 0.5 * (limits.obs_cov + limits.obs_cov.transpose()).eval();
  return limits;
}

ProjectedSeries projected_residual_series(
    const std::vector<MeanFieldState>& states, const InverseProblem& problem,
    const Eigen::MatrixXd& initial_particles, const PerturbedData& data,
    const MeanFieldLimits& limits) {
  if (initial_particles.cols() != limits.rls_solutions.cols() ||
      data.perturbed.cols() != limits.rls_solutions.cols())
    throw PreconditionError(
        "projected series: ensemble sizes of particles, data, and limits "
        "must match");
  if (!problem.op.is_linear())
    throw UnsupportedOperatorError(
        "projected series on the mean-field trajectory requires a linear "
        "operator");
  const Eigen::MatrixXd h = problem.op.materialize();
  const Eigen::MatrixXd initial_residual =
      initial_particles - limits.rls_solutions;

  ProjectedSeriesAccumulator acc(limits, data.perturbed);
  for (const MeanFieldState& state : states) {
    const Eigen::MatrixXd particles =
        limits.rls_solutions + state.state_map * initial_residual;
    acc.append(state.iteration, particles, h * particles);
  }
  return acc.take();
}

ProjectedSeries projected_residual_series(const RunTrace& trace,
                                          const InverseProblem& problem,
                                          const MeanFieldLimits& limits) {
  if (!problem.op.is_linear())
    throw UnsupportedOperatorError(
        "projected series requires a linear operator");
  const Eigen::MatrixXd h = problem.op.materialize();

  ProjectedSeriesAccumulator acc(limits, trace.data.perturbed);
  for (const IterationRecord& record : trace.records) {
    if (!record.particles) continue;
    acc.append(record.iteration, *record.particles, h * *record.particles);
  }
  if (acc.series().iterations.empty())
    throw PreconditionError(
        "projected series: trace carries no particle snapshots");
  return acc.take();
}

void export_spectral_csv(const Eigen::VectorXd& eigenvalues, int imax,
                         const std::string& csv_path) {
  std::vector<std::string> header = {"l", "gamma"};
  for (int i = 0; i <= imax; ++i)
    header.push_back("lambda_" + std::to_string(i));
  CsvWriter writer(csv_path, header);
  for (Eigen::Index l = 0; l < eigenvalues.size(); ++l) {
    const EigenvalueSequence seq =
        eigenvalue_recurrence(eigenvalues(l), imax);
    writer.cell(static_cast<std::int64_t>(l + 1));
    writer.cell(rate_exponent(eigenvalues(l)));
    for (int i = 0; i <= imax; ++i) writer.cell(seq.lambda[i]);
    writer.end_row();
  }
  writer.close();
}

}  // namespace ekrmle
