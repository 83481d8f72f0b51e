#include "ekrmle/experiments.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <utility>

#include "ekrmle/csv.hpp"
#include "ekrmle/errors.hpp"
#include "ekrmle/linalg.hpp"
#include "ekrmle/matrix_market.hpp"
#include "ekrmle/svg_plot.hpp"

namespace ekrmle {
namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

// Problem-generation substream ids (the particle slot of the stream path).
constexpr std::uint64_t kGenLeftBasis = 0;
constexpr std::uint64_t kGenRightBasis = 1;
constexpr std::uint64_t kGenSingularValues = 2;
constexpr std::uint64_t kGenNoiseFactor = 3;
constexpr std::uint64_t kGenPriorFactor = 4;

const std::vector<std::string> kConfigKeys = {
    "experiment",     "n",
    "d",              "rank",
    "ensemble_sizes", "reduced_orders",
    "include_full",   "max_iterations",
    "rel_step_tol",   "replicates",
    "seed",           "out_dir",
    "scheme",         "plots",
    "a_file",         "f_file",
    "alpha",          "sensor_frac",
    "dt",             "t_final",
    "num_obs",        "sigma_obs",
    "allow_large_ensembles"};

PerturbationScheme make_scheme(PerturbationVariant variant,
                               const Eigen::MatrixXd& noise_cov) {
  switch (variant) {
    case PerturbationVariant::Deterministic:
      return PerturbationScheme::deterministic();
    case PerturbationVariant::PerIteration:
      return PerturbationScheme::per_iteration(noise_cov);
    case PerturbationVariant::FixedRmle:
      break;
  }
  return PerturbationScheme::fixed_rmle(noise_cov);
}

double finite_mean(const std::vector<double>& values) {
  double sum = 0.0;
  int count = 0;
  for (double v : values) {
    if (std::isfinite(v)) {
      sum += v;
      ++count;
    }
  }
  return count ? sum / count : kNan;
}

// Keeps failure messages single-cell when embedded in CSV rows.
std::string sanitize_message(std::string text) {
  for (char& c : text)
    if (c == ',' || c == '\n' || c == '\r') c = ';';
  return text;
}

std::string join_indices(const std::vector<Eigen::Index>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(static_cast<long long>(values[i]));
  }
  return out;
}

std::vector<Eigen::Index> to_index_list(const std::vector<std::int64_t>& xs) {
  std::vector<Eigen::Index> out;
  out.reserve(xs.size());
  for (std::int64_t x : xs) out.push_back(static_cast<Eigen::Index>(x));
  return out;
}

Eigen::MatrixXd random_orthonormal(Eigen::Index rows, Eigen::Index cols,
                                   RandomStream& stream) {
  const Eigen::MatrixXd g = stream.normal_matrix(rows, cols);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  return qr.householderQ() * Eigen::MatrixXd::Identity(rows, cols);
}

}  // namespace

ExperimentConfig ExperimentConfig::convergence_defaults() { return {}; }

ExperimentConfig ExperimentConfig::smoothing_defaults() {
  ExperimentConfig config;
  config.experiment = "heat-smoothing";
  config.d = 200;
  config.ensemble_sizes = {1000, 10000};
  config.max_iterations = 200;
  config.rel_step_tol = 1e-10;
  config.replicates = 5;
  return config;
}

ExperimentConfig ExperimentConfig::from_config(const KeyValueConfig& kv) {
  for (const std::string& key : kv.keys()) {
    if (std::find(kConfigKeys.begin(), kConfigKeys.end(), key) ==
        kConfigKeys.end())
      throw PreconditionError("config: unknown key '" + key + "'");
  }

  const std::string experiment =
      kv.get_string("experiment", "random-convergence");
  ExperimentConfig config;
  if (experiment == "random-convergence") {
    config = convergence_defaults();
  } else if (experiment == "heat-smoothing") {
    config = smoothing_defaults();
  } else {
    throw PreconditionError(
        "config: unknown experiment '" + experiment +
        "' (expected random-convergence or heat-smoothing)");
  }

  config.n = kv.get_int("n", config.n);
  config.d = kv.get_int("d", config.d);
  config.rank = kv.get_int("rank", config.rank);
  if (kv.has("ensemble_sizes"))
    config.ensemble_sizes = to_index_list(kv.get_int_list("ensemble_sizes"));
  if (kv.has("reduced_orders"))
    config.reduced_orders = to_index_list(kv.get_int_list("reduced_orders"));
  config.include_full = kv.get_bool("include_full", config.include_full);
  config.max_iterations =
      static_cast<int>(kv.get_int("max_iterations", config.max_iterations));
  config.rel_step_tol = kv.get_double("rel_step_tol", config.rel_step_tol);
  config.replicates =
      static_cast<int>(kv.get_int("replicates", config.replicates));
  if (kv.has("seed"))
    config.seed = static_cast<std::uint64_t>(kv.get_int("seed"));
  config.output_dir = kv.get_string("out_dir", config.output_dir);
  if (kv.has("scheme")) {
    const std::string name = kv.get_string("scheme");
    const auto variant = variant_from_string(name);
    if (!variant)
      throw PreconditionError(
          "config: unknown scheme '" + name +
          "' (expected deterministic, per-iteration, or fixed-rmle)");
    config.scheme = *variant;
  }
  config.plots = kv.get_bool("plots", config.plots);
  config.a_file = kv.get_string("a_file", config.a_file);
  config.f_file = kv.get_string("f_file", config.f_file);
  config.alpha = kv.get_double("alpha", config.alpha);
  config.sensor_frac = kv.get_double("sensor_frac", config.sensor_frac);
  config.dt = kv.get_double("dt", config.dt);
  config.t_final = kv.get_double("t_final", config.t_final);
  config.num_obs = static_cast<int>(kv.get_int("num_obs", config.num_obs));
  config.sigma_obs = kv.get_double("sigma_obs", config.sigma_obs);
  config.allow_large_ensembles =
      kv.get_bool("allow_large_ensembles", config.allow_large_ensembles);
  return config;
}

KeyValueConfig ExperimentConfig::to_config() const {
  KeyValueConfig kv;
  kv.set("experiment", experiment);
  kv.set_int("n", n);
  kv.set_int("d", d);
  kv.set_int("rank", rank);
  kv.set("ensemble_sizes", join_indices(ensemble_sizes));
  kv.set("reduced_orders", join_indices(reduced_orders));
  kv.set_bool("include_full", include_full);
  kv.set_int("max_iterations", max_iterations);
  kv.set_double("rel_step_tol", rel_step_tol);
  kv.set_int("replicates", replicates);
  if (seed) kv.set_int("seed", static_cast<std::int64_t>(*seed));
  kv.set("out_dir", output_dir);
  kv.set("scheme", to_string(scheme));
  kv.set_bool("plots", plots);
  if (!a_file.empty()) kv.set("a_file", a_file);
  if (!f_file.empty()) kv.set("f_file", f_file);
  kv.set_double("alpha", alpha);
  kv.set_double("sensor_frac", sensor_frac);
  kv.set_double("dt", dt);
  kv.set_double("t_final", t_final);
  kv.set_int("num_obs", num_obs);
  kv.set_double("sigma_obs", sigma_obs);
  kv.set_bool("allow_large_ensembles", allow_large_ensembles);
  return kv;
}

void ExperimentConfig::validate() const {
  if (experiment != "random-convergence" && experiment != "heat-smoothing")
    throw PreconditionError(
        "config: unknown experiment '" + experiment +
        "' (expected random-convergence or heat-smoothing)");
  if (n < 1 || d < 1)
    throw PreconditionError("config: dimensions must be positive");
  // n and rank only drive the random-convergence generator; a smoothing run
  // sets d alone and must not trip over the unused fields.
  if (experiment == "random-convergence" && (rank < 1 || rank > std::min(n, d)))
    throw PreconditionError("config: rank must lie in [1, min(n, d)]");
  if (ensemble_sizes.empty())
    throw PreconditionError("config: at least one ensemble size is required");
  for (Eigen::Index size : ensemble_sizes) {
    if (size < 2)
      throw PreconditionError("config: ensemble sizes must be at least 2");
    if (size > 200000 && !allow_large_ensembles)
      throw PreconditionError(
          "config: ensemble size " + std::to_string(size) +
          " exceeds 200000; set allow_large_ensembles = true to run it "
          "anyway (expect multi-gigabyte buffers)");
  }
  for (Eigen::Index order : reduced_orders)
    if (order < 1)
      throw PreconditionError("config: reduced orders must be positive");
  if (max_iterations < 0)
    throw PreconditionError("config: max_iterations must be non-negative");
  if (replicates < 1)
    throw PreconditionError("config: at least one replicate is required");
  if (!seed)
    throw PreconditionError(
        "config: a seed is required; set `seed` in the config file or pass "
        "--seed");
  if (dt <= 0.0 || t_final <= 0.0)
    throw PreconditionError("config: dt and t_final must be positive");
  if (num_obs < 1)
    throw PreconditionError("config: at least one observation is required");
  if (sensor_frac < 0.0 || sensor_frac > 1.0)
    throw PreconditionError("config: sensor_frac must lie in [0, 1]");
  if (a_file.empty() != f_file.empty())
    throw PreconditionError(
        "config: a_file and f_file must be given together");
}

RandomProblem random_problem(Eigen::Index n, Eigen::Index d, Eigen::Index rank,
                             const StreamKey& key, double min_eigenvalue) {
  if (n < 1 || d < 1)
    throw PreconditionError("random problem: dimensions must be positive");
  if (rank < 1 || rank >= std::min(n, d))
    throw PreconditionError(
        "random problem: rank must satisfy 1 <= rank < min(n, d) so that "
        "both kernels of the operator are nontrivial");
  if (min_eigenvalue <= 0.0)
    throw PreconditionError(
        "random problem: the eigenvalue floor must be positive");

  RandomStream left_stream =
      key.stream(stream_tag::kProblemGeneration, kGenLeftBasis, 0);
  RandomStream right_stream =
      key.stream(stream_tag::kProblemGeneration, kGenRightBasis, 0);
  RandomStream value_stream =
      key.stream(stream_tag::kProblemGeneration, kGenSingularValues, 0);
  RandomStream noise_stream =
      key.stream(stream_tag::kProblemGeneration, kGenNoiseFactor, 0);
  RandomStream prior_stream =
      key.stream(stream_tag::kProblemGeneration, kGenPriorFactor, 0);

  const Eigen::MatrixXd left = random_orthonormal(n, rank, left_stream);
  const Eigen::MatrixXd right = random_orthonormal(d, rank, right_stream);
  Eigen::VectorXd singular_values(rank);
  const double log_lo = std::log(0.1);
  const double log_hi = std::log(10.0);
  for (Eigen::Index l = 0; l < rank; ++l)
    singular_values(l) =
        std::exp(log_lo + (log_hi - log_lo) * value_stream.uniform());
  const Eigen::MatrixXd h =
      left * singular_values.asDiagonal() * right.transpose();

  const Eigen::MatrixXd noise_factor =
      noise_stream.normal_matrix(n, n) / std::sqrt(static_cast<double>(n));
  Eigen::MatrixXd gamma = Eigen::MatrixXd::Zero(n, n);
  gamma.selfadjointView<Eigen::Lower>().rankUpdate(noise_factor);
  gamma = Eigen::MatrixXd(gamma.selfadjointView<Eigen::Lower>());
  gamma.diagonal().array() += 0.1;

  const Eigen::Index prior_rank =
      std::min<Eigen::Index>(d - 1, rank + (rank + 1) / 2);
  // Seed part of the prior factor inside range(H^T): the prior span must
  // overlap the observable directions without containing them, so both
  // convergent and frozen components are populated. A single observable
  // direction cannot be partially covered, so rank-1 operators get a fully
  // generic factor instead.
  const Eigen::Index planted =
      rank >= 2 ? std::min<Eigen::Index>((rank + 1) / 2, prior_rank) : 0;
  Eigen::MatrixXd prior_factor(d, prior_rank);
  if (planted > 0)
    prior_factor.leftCols(planted) =
        right * prior_stream.normal_matrix(rank, planted);
  if (prior_rank > planted)
    prior_factor.rightCols(prior_rank - planted) =
        prior_stream.normal_matrix(d, prior_rank - planted);
  prior_factor /= std::sqrt(static_cast<double>(prior_rank));
  Eigen::MatrixXd c0 = Eigen::MatrixXd::Zero(d, d);
  c0.selfadjointView<Eigen::Lower>().rankUpdate(prior_factor);
  c0 = Eigen::MatrixXd(c0.selfadjointView<Eigen::Lower>());

  // Pin the smallest retained interaction eigenvalue: it sets the slowest
  // contraction rate, and leaving it to chance makes convergence studies
  // incomparable across draws.
  const StateSpectral spectral = state_eigenproblem(c0, h, gamma);
  if (spectral.rank == 0)
    throw NumericalError(
        "random problem: the generated prior does not interact with the "
        "operator");
  c0 *= min_eigenvalue / spectral.eigenvalues(spectral.rank - 1);

  RandomStream truth_stream = key.stream(stream_tag::kTruth);
  Eigen::VectorXd truth = truth_stream.normal_vector(d);
  RandomStream data_stream = key.stream(stream_tag::kDataSynthesis);
  const auto gamma_llt = spd_cholesky(gamma, "random problem: noise");
  Eigen::VectorXd y =
      h * truth + gamma_llt.matrixL() * data_stream.normal_vector(n);

  InverseProblem problem{
      ForwardOperator::dense(h), std::move(gamma), std::move(y),
      GaussianPrior{Eigen::VectorXd::Zero(d), std::move(c0)}};
  validate(problem);
  return RandomProblem{std::move(problem), std::move(truth), rank};
}

std::string to_string(SubspaceTag tag) {
  switch (tag) {
    case SubspaceTag::StateConvergent:
      return "state_p";
    case SubspaceTag::StateFrozen:
      return "state_s";
    case SubspaceTag::ObsConvergent:
      return "obs_p";
    case SubspaceTag::ObsFrozen:
      return "obs_s";
  }
  return "unknown";
}

std::string to_string(StatisticTag tag) {
  return tag == StatisticTag::MeanError ? "mean-error" : "cov-error";
}

ConvergenceResult convergence_experiment(const ExperimentConfig& config) {
  config.validate();
  if (config.scheme == PerturbationVariant::PerIteration)
    throw PreconditionError(
        "convergence experiment: per-iteration redraws have no fixed limit "
        "points; use fixed-rmle or deterministic");

  const std::uint64_t seed = *config.seed;
  const std::filesystem::path out_dir = config.output_dir;
  std::filesystem::create_directories(out_dir);
  const std::size_t length = static_cast<std::size_t>(config.max_iterations) + 1;

  ConvergenceResult result;
  result.runs.reserve(config.ensemble_sizes.size() *
                      static_cast<std::size_t>(config.replicates));

  for (Eigen::Index ensemble_size : config.ensemble_sizes) {
    std::array<std::vector<double>, 8> sums;
    std::array<std::vector<int>, 8> counts;
    for (auto& s : sums) s.assign(length, 0.0);
    for (auto& c : counts) c.assign(length, 0);

    for (int r = 0; r < config.replicates; ++r) {
      const StreamKey key{seed, static_cast<std::uint64_t>(r)};
      const RandomProblem generated =
          random_problem(config.n, config.d, config.rank, key);
      const Ensemble init =
          initial_ensemble(*generated.problem.prior, ensemble_size, key);
      const PerturbationScheme scheme =
          make_scheme(config.scheme, generated.problem.noise_cov);
      // perturb_observations is counter-based, so this is bit-identical to
      // the draw run() makes internally for the same key.
      const PerturbedData data = perturb_observations(
          generated.problem.data, scheme, ensemble_size, key);
      // Compare against the mean-field limits of the sampling distribution,
      // not the realized ensemble: a small ensemble converges to its own
      // span-limited fixed points, and the gap to the mean-field limit is
      // exactly what the study measures.
      const MeanFieldLimits limits =
          mean_field_limits(generated.problem, init, data,
                            generated.problem.prior->mean,
                            generated.problem.prior->cov);

      ProjectedSeriesAccumulator acc(limits, data.perturbed,
                                     /*keep_particle_norms=*/false);
      TraceOptions options;
      options.record_covariances = false;
      options.record_misfits = false;
      const StoppingRule stop{config.max_iterations, config.rel_step_tol};
      run(generated.problem, init, scheme, stop, key, options,
          [&acc](const Ensemble& ensemble,
                 const Eigen::MatrixXd& forward_values) {
            acc.append(ensemble.iteration, ensemble.particles, forward_values);
          });

      ProjectedSeries series = acc.take();
      const std::array<const std::vector<double>*, 8> columns = {
          &series.state_p_mean_rel, &series.state_s_mean_rel,
          &series.obs_p_mean_rel,   &series.obs_s_mean_rel,
          &series.state_p_cov_rel,  &series.state_s_cov_rel,
          &series.obs_p_cov_rel,    &series.obs_s_cov_rel};
      for (std::size_t k = 0; k < columns.size(); ++k) {
        const std::vector<double>& column = *columns[k];
        for (std::size_t i = 0; i < column.size() && i < length; ++i) {
          if (std::isfinite(column[i])) {
            sums[k][i] += column[i];
            ++counts[k][i];
          }
        }
      }
      result.runs.push_back(
          ConvergenceReplicate{ensemble_size, r, std::move(series)});
    }

    constexpr std::array<SubspaceTag, 4> kSpaces = {
        SubspaceTag::StateConvergent, SubspaceTag::StateFrozen,
        SubspaceTag::ObsConvergent, SubspaceTag::ObsFrozen};
    for (std::size_t k = 0; k < 8; ++k) {
      MetricSeries metric;
      metric.subspace = kSpaces[k % 4];
      metric.statistic =
          k < 4 ? StatisticTag::MeanError : StatisticTag::CovError;
      metric.ensemble_size = ensemble_size;
      metric.values.resize(length);
      for (std::size_t i = 0; i < length; ++i)
        metric.values[i] = counts[k][i] ? sums[k][i] / counts[k][i] : kNan;
      result.aggregated.push_back(std::move(metric));
    }
  }

  result.means_csv = out_dir / "means.csv";
  result.covs_csv = out_dir / "covs.csv";
  const auto write_statistic = [&result](const std::filesystem::path& path,
                                         StatisticTag statistic) {
    CsvWriter writer(path, {"ensemble_size", "subspace", "iteration", "value"});
    for (const MetricSeries& metric : result.aggregated) {
      if (metric.statistic != statistic) continue;
      for (std::size_t i = 0; i < metric.values.size(); ++i) {
        writer.cell(static_cast<std::int64_t>(metric.ensemble_size));
        writer.cell(to_string(metric.subspace));
        writer.cell(static_cast<std::int64_t>(i));
        writer.cell(metric.values[i]);
        writer.end_row();
      }
    }
    writer.close();
  };
  write_statistic(result.means_csv, StatisticTag::MeanError);
  write_statistic(result.covs_csv, StatisticTag::CovError);

  if (config.plots) {
    const auto chart = [&result, &out_dir](const std::string& filename,
                                           StatisticTag statistic,
                                           const std::string& title) {
      std::vector<PlotSeries> lines;
      for (const MetricSeries& metric : result.aggregated) {
        if (metric.statistic != statistic) continue;
        PlotSeries line;
        line.label = "J=" + std::to_string(metric.ensemble_size) + " " +
                     to_string(metric.subspace);
        line.x.resize(metric.values.size());
        for (std::size_t i = 0; i < line.x.size(); ++i)
          line.x[i] = static_cast<double>(i);
        line.y = metric.values;
        lines.push_back(std::move(line));
      }
      PlotSpec spec;
      spec.title = title;
      spec.x_label = "iteration";
      spec.y_label = "relative error";
      spec.log_y = true;
      write_svg_line_chart(out_dir / filename, spec, lines);
    };
    chart("means.svg", StatisticTag::MeanError,
          "Relative ensemble mean errors");
    chart("covs.svg", StatisticTag::CovError,
          "Relative ensemble covariance errors");
  }
  return result;
}

PosteriorErrors posterior_error_metrics(const Eigen::VectorXd& mean,
                                        const Eigen::MatrixXd& cov,
                                        const GaussianPosterior& reference) {
  const Eigen::Index d = reference.mean.size();
  if (reference.cov.rows() != d || reference.cov.cols() != d)
    throw ShapeError("posterior errors: reference moments disagree in size");
  if (mean.size() != d || cov.rows() != d || cov.cols() != d)
    throw ShapeError("posterior errors: moments must match the reference (" +
                     std::to_string(d) + " states)");
  const auto llt = spd_cholesky(reference.cov, "posterior errors: reference");

  const Eigen::VectorXd weighted_diff = llt.matrixL().solve(mean - reference.mean);
  const Eigen::VectorXd weighted_ref = llt.matrixL().solve(reference.mean);
  const double mean_den = weighted_ref.norm();
  const double cov_den = spectral_norm(reference.cov);

  PosteriorErrors errors;
  errors.mean_error =
      mean_den > 0.0 ? weighted_diff.norm() / mean_den : kNan;
  errors.cov_error =
      cov_den > 0.0 ? spectral_norm(reference.cov - cov) / cov_den : kNan;
  return errors;
}

PosteriorErrors posterior_error_metrics(const Ensemble& ensemble,
                                        const GaussianPosterior& reference) {
  return posterior_error_metrics(sample_mean(ensemble.particles),
                                 sample_cov(ensemble.particles), reference);
}

SmoothingSetup smoothing_setup(const LTISystem& system, const StreamKey& key) {
  validate(system);
  const Eigen::Index d = system.state_dim();

  Eigen::MatrixXd forward = dense_forward_matrix(system);
  Eigen::MatrixXd noise_cov = stacked_noise_cov(system);
  Eigen::MatrixXd prior_cov = prior_from_lyapunov(system.a);

  RandomStream truth_stream = key.stream(stream_tag::kTruth);
  const auto prior_llt = spd_cholesky(prior_cov, "smoothing prior");
  Eigen::VectorXd truth =
      prior_llt.matrixL() * truth_stream.normal_vector(d);

  RandomStream noise_stream = key.stream(stream_tag::kDataSynthesis);
  const Eigen::MatrixXd noise_sqrt = psd_sqrt(noise_cov, "stacked noise");
  Eigen::VectorXd data =
      forward * truth + noise_sqrt * noise_stream.normal_vector(noise_cov.rows());

  InverseProblem problem{ForwardOperator::dense(forward), noise_cov, data,
                         GaussianPrior{Eigen::VectorXd::Zero(d), prior_cov}};
  validate(problem);
  GaussianPosterior posterior = exact_posterior(problem);

  return SmoothingSetup{system,
                        std::move(forward),
                        std::move(noise_cov),
                        std::move(prior_cov),
                        std::move(truth),
                        std::move(data),
                        std::move(posterior),
                        std::move(problem)};
}

LTISystem system_from_config(const ExperimentConfig& config) {
  const double sigma = config.sigma_obs > 0.0 ? config.sigma_obs : 1.0;
  if (!config.a_file.empty()) {
    if (config.f_file.empty())
      throw PreconditionError(
          "smoothing system: f_file is required alongside a_file");
    LTISystem system;
    system.a = read_market_matrix(config.a_file);
    system.f = read_market_matrix(config.f_file);
    system.dt = config.dt;
    system.obs_times.resize(static_cast<std::size_t>(config.num_obs));
    const double spacing = config.t_final / config.num_obs;
    for (int k = 0; k < config.num_obs; ++k)
      system.obs_times[static_cast<std::size_t>(k)] = spacing * (k + 1);
    system.eta_cov =
        sigma * sigma *
        Eigen::MatrixXd::Identity(system.f.rows(), system.f.rows());
    validate(system);
    return system;
  }
  return heat_model(static_cast<int>(config.d), config.alpha,
                    config.sensor_frac, config.dt, config.t_final,
                    config.num_obs, sigma);
}

double calibrated_obs_sigma(const LTISystem& system,
                            const Eigen::VectorXd& truth, double fraction) {
  if (fraction <= 0.0)
    throw PreconditionError("noise calibration requires a positive fraction");
  const Eigen::VectorXd noiseless = observe(system, simulate(system, truth));
  const double peak = noiseless.cwiseAbs().maxCoeff();
  if (!(peak > 0.0))
    throw PreconditionError(
        "noise calibration: the noiseless output is identically zero");
  return fraction * peak;
}

SmoothingResult smoothing_experiment(const ExperimentConfig& config) {
  config.validate();
  const std::uint64_t seed = *config.seed;
  const std::filesystem::path out_dir = config.output_dir;
  std::filesystem::create_directories(out_dir);
  const StreamKey setup_key{seed, 0};

  LTISystem system = system_from_config(config);
  if (config.sigma_obs <= 0.0) {
    // The truth draw depends only on the dynamics, so calibrate the noise
    // level against it and rebuild; the same draw recurs inside the setup.
    const Eigen::MatrixXd prior_cov = prior_from_lyapunov(system.a);
    RandomStream truth_stream = setup_key.stream(stream_tag::kTruth);
    const Eigen::VectorXd truth =
        spd_cholesky(prior_cov, "smoothing prior").matrixL() *
        truth_stream.normal_vector(system.state_dim());
    const double sigma = calibrated_obs_sigma(system, truth);
    system.eta_cov =
        sigma * sigma *
        Eigen::MatrixXd::Identity(system.output_dim(), system.output_dim());
  }

  SmoothingResult result{smoothing_setup(system, setup_key)};
  const SmoothingSetup& setup = result.setup;
  const GaussianPrior prior{Eigen::VectorXd::Zero(system.state_dim()),
                            setup.prior_cov};

  // Balance once; reduction failures are recorded per order.
  std::optional<BalancingFactors> factors;
  std::string balance_error;
  try {
    factors = balance(observability_gramian(system), setup.prior_cov);
  } catch (const Error& e) {
    balance_error = e.what();
  }

  struct ForwardVariant {
    std::string label;
    Eigen::Index rho = 0;
    Eigen::MatrixXd matrix;
    std::string error;
  };
  std::vector<ForwardVariant> variants;
  if (config.include_full)
    variants.push_back(ForwardVariant{"full", 0, setup.forward, ""});

  for (Eigen::Index rho : config.reduced_orders) {
    result.orders.push_back(rho);
    const std::string label = "rho=" + std::to_string(rho);
    try {
      if (!factors)
        throw NumericalError("balancing failed: " + balance_error);
      const ReducedModel model = reduce(system, *factors, rho);
      const GaussianPosterior reduced = reduced_posterior(
          model, setup.prior_cov, setup.noise_cov, setup.data);
      const PosteriorErrors errors =
          posterior_error_metrics(reduced.mean, reduced.cov, setup.posterior);
      result.exact_mean_errors.push_back(errors.mean_error);
      result.exact_cov_errors.push_back(errors.cov_error);
      result.exact_status.push_back("ok");
      variants.push_back(
          ForwardVariant{label, rho, reduced_forward_matrix(model), ""});
    } catch (const Error& e) {
      result.exact_mean_errors.push_back(kNan);
      result.exact_cov_errors.push_back(kNan);
      result.exact_status.push_back(sanitize_message(e.what()));
      variants.push_back(
          ForwardVariant{label, rho, {}, sanitize_message(e.what())});
    }
  }

  for (const ForwardVariant& variant : variants) {
    std::optional<InverseProblem> augmented;
    std::string variant_error = variant.error;
    if (variant_error.empty()) {
      try {
        const InverseProblem base{ForwardOperator::dense(variant.matrix),
                                  setup.noise_cov, setup.data, prior};
        augmented = augment_rls(base);
      } catch (const Error& e) {
        variant_error = sanitize_message(e.what());
      }
    }

    for (Eigen::Index ensemble_size : config.ensemble_sizes) {
      SmoothingCell cell;
      cell.forward_label = variant.label;
      cell.rho = variant.rho;
      cell.ensemble_size = ensemble_size;
      if (!variant_error.empty()) {
        cell.status = variant_error;
        cell.mean_errors.assign(config.replicates, kNan);
        cell.cov_errors.assign(config.replicates, kNan);
        cell.mean_error = kNan;
        cell.cov_error = kNan;
        result.cells.push_back(std::move(cell));
        continue;
      }

      const PerturbationScheme scheme =
          make_scheme(config.scheme, augmented->noise_cov);
      for (int r = 0; r < config.replicates; ++r) {
        try {
          const StreamKey key{seed, static_cast<std::uint64_t>(r)};
          const Ensemble init = initial_ensemble(prior, ensemble_size, key);
          TraceOptions options;
          options.record_covariances = false;
          options.record_misfits = false;
          const StoppingRule stop{config.max_iterations, config.rel_step_tol};
          const RunTrace trace =
              run(*augmented, init, scheme, stop, key, options);
          const PosteriorErrors errors =
              posterior_error_metrics(trace.final_ensemble, setup.posterior);
          cell.mean_errors.push_back(errors.mean_error);
          cell.cov_errors.push_back(errors.cov_error);
          ++cell.replicates_ok;
        } catch (const Error& e) {
          cell.mean_errors.push_back(kNan);
          cell.cov_errors.push_back(kNan);
          if (cell.status == "ok") cell.status = sanitize_message(e.what());
        }
      }
      cell.mean_error = finite_mean(cell.mean_errors);
      cell.cov_error = finite_mean(cell.cov_errors);
      result.cells.push_back(std::move(cell));
    }
  }

  result.errs_vs_j_csv = out_dir / "errs_vs_J.csv";
  {
    CsvWriter writer(result.errs_vs_j_csv,
                     {"forward", "rho", "ensemble_size", "mean_error",
                      "cov_error", "replicates_ok", "status"});
    for (const SmoothingCell& cell : result.cells) {
      writer.cell(cell.forward_label);
      writer.cell(static_cast<std::int64_t>(cell.rho));
      writer.cell(static_cast<std::int64_t>(cell.ensemble_size));
      writer.cell(cell.mean_error);
      writer.cell(cell.cov_error);
      writer.cell(static_cast<std::int64_t>(cell.replicates_ok));
      writer.cell(cell.status);
      writer.end_row();
    }
    writer.close();
  }

  result.errs_vs_rho_csv = out_dir / "errs_vs_rho.csv";
  {
    std::vector<std::string> header = {"rho", "exact_mean_error",
                                       "exact_cov_error"};
    for (Eigen::Index size : config.ensemble_sizes) {
      header.push_back("mean_error_J" + std::to_string(size));
      header.push_back("cov_error_J" + std::to_string(size));
    }
    CsvWriter writer(result.errs_vs_rho_csv, header);
    for (std::size_t o = 0; o < result.orders.size(); ++o) {
      writer.cell(static_cast<std::int64_t>(result.orders[o]));
      writer.cell(result.exact_mean_errors[o]);
      writer.cell(result.exact_cov_errors[o]);
      for (Eigen::Index size : config.ensemble_sizes) {
        double mean_error = kNan;
        double cov_error = kNan;
        for (const SmoothingCell& cell : result.cells) {
          if (cell.rho == result.orders[o] && cell.ensemble_size == size) {
            mean_error = cell.mean_error;
            cov_error = cell.cov_error;
            break;
          }
        }
        writer.cell(mean_error);
        writer.cell(cov_error);
      }
      writer.end_row();
    }
    writer.close();
  }

  if (config.plots) {
    std::vector<double> j_axis;
    for (Eigen::Index size : config.ensemble_sizes)
      j_axis.push_back(static_cast<double>(size));
    std::vector<double> rho_axis;
    for (Eigen::Index order : result.orders)
      rho_axis.push_back(static_cast<double>(order));

    const auto vs_j_chart = [&](const std::string& filename, bool use_mean,
                                const std::string& title) {
      std::vector<PlotSeries> lines;
      for (const ForwardVariant& variant : variants) {
        PlotSeries line;
        line.label = variant.label;
        line.x = j_axis;
        for (const SmoothingCell& cell : result.cells)
          if (cell.forward_label == variant.label)
            line.y.push_back(use_mean ? cell.mean_error : cell.cov_error);
        lines.push_back(std::move(line));
      }
      for (std::size_t o = 0; o < result.orders.size(); ++o) {
        PlotSeries line;
        line.label =
            "exact rho=" + std::to_string(result.orders[o]);
        line.dashed = true;
        line.x = j_axis;
        line.y.assign(j_axis.size(), use_mean ? result.exact_mean_errors[o]
                                              : result.exact_cov_errors[o]);
        lines.push_back(std::move(line));
      }
      PlotSpec spec;
      spec.title = title;
      spec.x_label = "ensemble size";
      spec.y_label = "relative error";
      spec.log_x = true;
      spec.log_y = true;
      write_svg_line_chart(out_dir / filename, spec, lines);
    };
    vs_j_chart("mean_error_vs_J.svg", true,
               "Posterior mean error vs ensemble size");
    vs_j_chart("cov_error_vs_J.svg", false,
               "Posterior covariance error vs ensemble size");

    const auto vs_rho_chart = [&](const std::string& filename, bool use_mean,
                                  const std::string& title) {
      std::vector<PlotSeries> lines;
      PlotSeries exact;
      exact.label = "exact reduced";
      exact.dashed = true;
      exact.x = rho_axis;
      exact.y = use_mean ? result.exact_mean_errors : result.exact_cov_errors;
      lines.push_back(std::move(exact));
      for (Eigen::Index size : config.ensemble_sizes) {
        PlotSeries line;
        line.label = "J=" + std::to_string(size);
        line.x = rho_axis;
        for (Eigen::Index order : result.orders) {
          double value = kNan;
          for (const SmoothingCell& cell : result.cells)
            if (cell.rho == order && cell.ensemble_size == size) {
              value = use_mean ? cell.mean_error : cell.cov_error;
              break;
            }
          line.y.push_back(value);
        }
        lines.push_back(std::move(line));
      }
      PlotSpec spec;
      spec.title = title;
      spec.x_label = "reduced order";
      spec.y_label = "relative error";
      spec.log_y = true;
      write_svg_line_chart(out_dir / filename, spec, lines);
    };
    vs_rho_chart("mean_error_vs_rho.svg", true,
                 "Posterior mean error vs reduced order");
    vs_rho_chart("cov_error_vs_rho.svg", false,
                 "Posterior covariance error vs reduced order");
  }

  return result;
}

}  // namespace ekrmle
