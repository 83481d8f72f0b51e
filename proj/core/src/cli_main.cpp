#include "ekrmle/cli.hpp"

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Dense>

#include "ekrmle/balanced_truncation.hpp"
#include "ekrmle/csv.hpp"
#include "ekrmle/ensemble.hpp"
#include "ekrmle/errors.hpp"
#include "ekrmle/experiments.hpp"
#include "ekrmle/inverse_problem.hpp"
#include "ekrmle/kv_config.hpp"
#include "ekrmle/linalg.hpp"
#include "ekrmle/lti.hpp"
#include "ekrmle/matrix_market.hpp"
#include "ekrmle/mean_field.hpp"
#include "ekrmle/rng.hpp"

namespace ekrmle {
namespace {

constexpr std::uint64_t kSelftestSeed = 20260819;

struct CommonFlags {
  std::string config_file;
  std::uint64_t seed_value = 0;
  bool seed_given = false;
  std::string out_dir;
  bool no_plots = false;
};

void add_common_flags(CLI::App* sub, CommonFlags& flags) {
  sub->add_option("--config", flags.config_file,
                  "Key-value config file (documented keys; see README)");
  sub->add_option("--seed", flags.seed_value,
                  "RNG seed; overrides the config file");
  sub->add_option("--out", flags.out_dir,
                  "Output directory; overrides the config file");
  sub->add_flag("--no-plots", flags.no_plots, "Skip SVG chart output");
}

ExperimentConfig load_config(const std::string& expected_experiment,
                             const CommonFlags& flags) {
  KeyValueConfig kv;
  if (!flags.config_file.empty())
    kv = KeyValueConfig::parse_file(flags.config_file);
  if (kv.has("experiment")) {
    const std::string given = kv.get_string("experiment");
    if (given != expected_experiment)
      throw PreconditionError("config: experiment '" + given +
                              "' does not match this subcommand (expected " +
                              expected_experiment + ")");
  } else {
    kv.set("experiment", expected_experiment);
  }
  ExperimentConfig config = ExperimentConfig::from_config(kv);
  if (flags.seed_given) config.seed = flags.seed_value;
  if (!flags.out_dir.empty()) config.output_dir = flags.out_dir;
  if (flags.no_plots) config.plots = false;
  return config;
}

int run_convergence(const CommonFlags& flags) {
  const ExperimentConfig config = load_config("random-convergence", flags);
  const ConvergenceResult result = convergence_experiment(config);
  std::cout << "wrote " << result.means_csv.string() << " and "
            << result.covs_csv.string() << " (" << result.runs.size()
            << " runs)\n";
  return 0;
}

int run_smoothing(const CommonFlags& flags) {
  const ExperimentConfig config = load_config("heat-smoothing", flags);
  const SmoothingResult result = smoothing_experiment(config);
  std::cout << "wrote " << result.errs_vs_j_csv.string() << " and "
            << result.errs_vs_rho_csv.string() << " (" << result.cells.size()
            << " cells)\n";
  return 0;
}

int run_reduce(const CommonFlags& flags, std::int64_t rho) {
  ExperimentConfig config = load_config("heat-smoothing", flags);
  if (config.sigma_obs <= 0.0)
    throw PreconditionError(
        "reduce: sigma_obs must be positive (automatic noise calibration "
        "needs a data draw; set sigma_obs in the config)");
  const LTISystem system = system_from_config(config);
  const Eigen::MatrixXd prior_cov = prior_from_lyapunov(system.a);
  const BalancingFactors factors =
      balance(observability_gramian(system), prior_cov);
  const ReducedModel model =
      reduce(system, factors, static_cast<Eigen::Index>(rho));
  std::filesystem::create_directories(config.output_dir);
  export_reduced_model(model, config.output_dir);
  std::cout << "wrote order-" << model.order << " reduced model to "
            << config.output_dir << "\n";
  return 0;
}

int run_posterior(const std::string& problem_dir, const std::string& out_arg) {
  const std::filesystem::path dir = problem_dir;
  const Eigen::MatrixXd h = read_market_matrix(dir / "H.mtx");
  const Eigen::MatrixXd gamma = read_market_covariance(dir / "gamma.mtx");
  const Eigen::VectorXd y = read_market_vector(dir / "y.mtx");
  const Eigen::VectorXd prior_mean = read_market_vector(dir / "prior_mean.mtx");
  const Eigen::MatrixXd prior_cov =
      read_market_covariance(dir / "prior_cov.mtx");

  InverseProblem problem{ForwardOperator::dense(h), gamma, y,
                         GaussianPrior{prior_mean, prior_cov}};
  validate(problem);
  const GaussianPosterior posterior = exact_posterior(problem);

  const std::filesystem::path out =
      out_arg.empty() ? dir : std::filesystem::path(out_arg);
  std::filesystem::create_directories(out);
  write_market_vector(out / "mu_pos.mtx", posterior.mean);
  write_market_covariance(out / "gamma_pos.mtx", posterior.cov);
  std::cout << "wrote " << (out / "mu_pos.mtx").string() << " and "
            << (out / "gamma_pos.mtx").string() << " (" << posterior.mean.size()
            << " states)\n";
  return 0;
}

bool files_have_same_bytes(const std::filesystem::path& a,
                           const std::filesystem::path& b) {
  std::ifstream fa(a, std::ios::binary);
  std::ifstream fb(b, std::ios::binary);
  if (!fa || !fb) return false;
  std::ostringstream sa;
  std::ostringstream sb;
  sa << fa.rdbuf();
  sb << fb.rdbuf();
  return sa.str() == sb.str();
}

}  // namespace

int run_selftest(const std::filesystem::path& out_dir, std::ostream& log) {
  std::filesystem::create_directories(out_dir);
  const StreamKey key{kSelftestSeed, 0};

  struct CheckRow {
    std::string name;
    double value;
    double tolerance;
    bool pass;
  };
  std::vector<CheckRow> rows;
  const auto check = [&rows, &log](const std::string& name, double value,
                                   double tolerance) {
    const bool pass = std::isfinite(value) && value <= tolerance;
    rows.push_back({name, value, tolerance, pass});
    log << (pass ? "[PASS] " : "[FAIL] ") << name << " (value "
        << format_double(value) << ", tolerance " << format_double(tolerance)
        << ")\n";
  };
  const auto guarded = [&check](const std::string& name, double tolerance,
                                const auto& body) {
    try {
      check(name, body(), tolerance);
    } catch (const std::exception& e) {
      check(name + " [" + e.what() + "]",
            std::numeric_limits<double>::quiet_NaN(), tolerance);
    }
  };

  // A one-dimensional update small enough to verify by hand: particles
  // {0, 2} with H = I, Gamma = I, y = 1 have sample variance 2, so the
  // gain is 2/3 and the update moves them to {2/3, 4/3}.
  guarded("kalman-update-hand-example", 1e-12, [] {
    Eigen::MatrixXd particles(1, 2);
    particles << 0.0, 2.0;
    const Eigen::MatrixXd h = Eigen::MatrixXd::Identity(1, 1);
    const Eigen::MatrixXd gamma = Eigen::MatrixXd::Identity(1, 1);
    const Eigen::VectorXd y = Eigen::VectorXd::Ones(1);
    const InverseProblem problem{ForwardOperator::dense(h), gamma, y,
                                 std::nullopt};
    const Ensemble stepped = eki_step(problem, initial_ensemble(particles),
                                      PerturbedData::exact(y, 2));
    Eigen::MatrixXd expected(1, 2);
    expected << 2.0 / 3.0, 4.0 / 3.0;
    return (stepped.particles - expected).cwiseAbs().maxCoeff();
  });

  // The weighted least-squares solution leaves no misfit in range(H^T).
  guarded("weighted-least-squares-stationarity", 1e-8, [&key] {
    const RandomProblem generated = random_problem(20, 30, 8, key);
    const Eigen::MatrixXd h = generated.problem.op.dense_matrix();
    const Eigen::VectorXd v_star =
        minimum_norm_solution(h, generated.problem.noise_cov,
                              generated.problem.data);
    const Eigen::VectorXd gradient =
        h.transpose() * spd_cholesky(generated.problem.noise_cov, "noise")
                            .solve(generated.problem.data - h * v_star);
    return gradient.norm() /
           (h.transpose() *
            spd_cholesky(generated.problem.noise_cov, "noise")
                .solve(generated.problem.data))
               .norm();
  });

  // lambda_0 = 1 must halve in one step of the eigenvalue recurrence.
  guarded("scalar-eigenvalue-halving", 1e-14, [] {
    const EigenvalueSequence sequence = eigenvalue_recurrence(1.0, 1);
    return std::abs(sequence.lambda.at(1) - 0.5);
  });

  // Spectral projectors must be complementary idempotents commuting with
  // the iteration maps they split.
  guarded("projector-idempotence", 1e-8, [&key] {
    const RandomProblem generated = random_problem(20, 30, 8, key);
    const Eigen::MatrixXd h = generated.problem.op.dense_matrix();
    const StateSpectral state = state_eigenproblem(
        generated.problem.prior->cov, h, generated.problem.noise_cov);
    const ObsSpectral obs = obs_eigenproblem(
        generated.problem.prior->cov, h, generated.problem.noise_cov);
    const Eigen::Index d = h.cols();
    const Eigen::Index n = h.rows();
    double err = 0.0;
    const auto& p = state.projector;
    const auto& s = state.complement;
    err = std::max(err, spectral_norm(p * p - p));
    err = std::max(err, spectral_norm(s * s - s));
    err = std::max(err, spectral_norm(p * s));
    err = std::max(err,
                   spectral_norm(p + s - Eigen::MatrixXd::Identity(d, d)));
    const auto& cp = obs.projector;
    const auto& cs = obs.complement;
    err = std::max(err, spectral_norm(cp * cp - cp));
    err = std::max(err, spectral_norm(cs * cs - cs));
    err = std::max(err, spectral_norm(cp * cs));
    err = std::max(err,
                   spectral_norm(cp + cs - Eigen::MatrixXd::Identity(n, n)));
    return err;
  });

  // Feeding the limits back into the error metrics must report zero error.
  guarded("mean-field-limit-zero-error", 1e-12, [&key] {
    const RandomProblem generated = random_problem(20, 30, 8, key);
    const Ensemble init = initial_ensemble(*generated.problem.prior, 10, key);
    const PerturbationScheme scheme =
        PerturbationScheme::fixed_rmle(generated.problem.noise_cov);
    const PerturbedData data =
        perturb_observations(generated.problem.data, scheme, 10, key);
    const MeanFieldLimits limits =
        mean_field_limits(generated.problem, init, data);
    ProjectedSeriesAccumulator acc(limits, data.perturbed,
                                   /*keep_particle_norms=*/false);
    acc.append(0, limits.state_particles, limits.obs_particles);
    const ProjectedSeries& series = acc.series();
    double err = 0.0;
    for (const std::vector<double>* column :
         {&series.state_p_mean_rel, &series.state_s_mean_rel,
          &series.obs_p_mean_rel, &series.obs_s_mean_rel,
          &series.state_p_cov_rel, &series.state_s_cov_rel,
          &series.obs_p_cov_rel, &series.obs_s_cov_rel}) {
      if (column->empty()) return std::numeric_limits<double>::quiet_NaN();
      err = std::max(err, std::abs(column->front()));
    }
    return err;
  });

  // Stacking the prior as pseudo-observations turns the regularized
  // problem into plain least squares whose solution is the posterior mean.
  guarded("posterior-recovery-via-augmentation", 1e-10, [&key] {
    RandomStream stream = key.stream(stream_tag::kProblemGeneration, 9, 0);
    const Eigen::Index n = 6;
    const Eigen::Index d = 4;
    const Eigen::MatrixXd h = stream.normal_matrix(n, d);
    Eigen::MatrixXd gamma = stream.normal_matrix(n, n);
    gamma = Eigen::MatrixXd(0.5 * Eigen::MatrixXd::Identity(n, n)) +
            gamma * gamma.transpose() / static_cast<double>(n);
    Eigen::MatrixXd prior_cov = stream.normal_matrix(d, d);
    prior_cov = Eigen::MatrixXd(0.5 * Eigen::MatrixXd::Identity(d, d)) +
                prior_cov * prior_cov.transpose() / static_cast<double>(d);
    const Eigen::VectorXd prior_mean = stream.normal_vector(d);
    const Eigen::VectorXd y = stream.normal_vector(n);
    const InverseProblem problem{ForwardOperator::dense(h), gamma, y,
                                 GaussianPrior{prior_mean, prior_cov}};
    const InverseProblem augmented = augment_rls(problem);
    const Eigen::VectorXd via_rls = minimum_norm_solution(
        augmented.op, augmented.noise_cov, augmented.data);
    const GaussianPosterior posterior = exact_posterior(problem);
    return (via_rls - posterior.mean).norm() / posterior.mean.norm();
  });

  // Keeping every direction of the balanced basis must reproduce the
  // posterior exactly.
  guarded("balanced-truncation-full-order-exactness", 1e-8, [&key] {
    RandomStream stream = key.stream(stream_tag::kProblemGeneration, 10, 0);
    const Eigen::Index d = 12;
    LTISystem system;
    system.a = -Eigen::MatrixXd::Identity(d, d) +
               0.3 * stream.normal_matrix(d, d) / std::sqrt(double(d));
    system.f = stream.normal_matrix(3, d);
    system.dt = 1e-3;
    system.obs_times = {0.5, 1.0};
    system.eta_cov = 0.5 * Eigen::MatrixXd::Identity(3, 3);
    const Eigen::MatrixXd prior_cov = prior_from_lyapunov(system.a);
    const StreamKey data_key{kSelftestSeed, 1};
    const SmoothingSetup setup = smoothing_setup(system, data_key);
    const BalancingFactors factors =
        balance(observability_gramian(system), prior_cov);
    const ReducedModel model = reduce(system, factors, d);
    const GaussianPosterior reduced = reduced_posterior(
        model, setup.prior_cov, setup.noise_cov, setup.data);
    const PosteriorErrors errors =
        posterior_error_metrics(reduced.mean, reduced.cov, setup.posterior);
    return std::max(errors.mean_error, errors.cov_error);
  });

  // Identical config and seed must yield identical CSV bytes.
  guarded("deterministic-csv-bytes", 0.5, [&out_dir] {
    ExperimentConfig config;
    config.n = 12;
    config.d = 16;
    config.rank = 5;
    config.ensemble_sizes = {8};
    config.max_iterations = 10;
    config.replicates = 2;
    config.seed = kSelftestSeed;
    config.plots = false;
    double mismatch = 0.0;
    for (const char* sub : {"selftest_run_a", "selftest_run_b"}) {
      config.output_dir = (out_dir / sub).string();
      convergence_experiment(config);
    }
    for (const char* file : {"means.csv", "covs.csv"}) {
      if (!files_have_same_bytes(out_dir / "selftest_run_a" / file,
                                 out_dir / "selftest_run_b" / file))
        mismatch = 1.0;
    }
    return mismatch;
  });

  CsvWriter writer(out_dir / "selftest.csv",
                   {"check", "value", "tolerance", "status"});
  bool all_pass = true;
  for (const CheckRow& row : rows) {
    writer.cell(row.name);
    writer.cell(row.value);
    writer.cell(row.tolerance);
    writer.cell(std::string(row.pass ? "pass" : "fail"));
    writer.end_row();
    all_pass = all_pass && row.pass;
  }
  writer.close();
  log << (all_pass ? "selftest passed" : "selftest FAILED") << " ("
      << rows.size() << " checks; " << (out_dir / "selftest.csv").string()
      << ")\n";
  return all_pass ? 0 : 2;
}

int cli_main(int argc, const char* const* argv) {
  CLI::App app{
      "Ensemble Kalman inversion with per-particle randomized data, "
      "mean-field convergence diagnostics, and balanced-truncation "
      "smoothing experiments"};
  app.require_subcommand(1);

  CommonFlags convergence_flags;
  CLI::App* convergence = app.add_subcommand(
      "convergence",
      "Run the randomized-operator convergence study (means.csv, covs.csv)");
  add_common_flags(convergence, convergence_flags);

  CommonFlags smoothing_flags;
  CLI::App* smoothing = app.add_subcommand(
      "smoothing",
      "Run the initial-condition smoothing study (errs_vs_J.csv, "
      "errs_vs_rho.csv)");
  add_common_flags(smoothing, smoothing_flags);

  CommonFlags reduce_flags;
  std::int64_t rho = 0;
  CLI::App* reduce_cmd = app.add_subcommand(
      "reduce", "Balance and truncate the smoothing model, exporting the "
                "reduced operators and their spectrum");
  add_common_flags(reduce_cmd, reduce_flags);
  reduce_cmd->add_option("--rho", rho, "Reduced order to keep")->required();

  std::string posterior_dir;
  std::string posterior_out;
  CLI::App* posterior = app.add_subcommand(
      "posterior", "Compute the exact Gaussian posterior of a problem "
                   "directory (H.mtx, gamma.mtx, y.mtx, prior_mean.mtx, "
                   "prior_cov.mtx)");
  posterior->add_option("dir", posterior_dir, "Problem directory")->required();
  posterior->add_option("--out", posterior_out,
                        "Output directory (defaults to the problem directory)");

  std::string selftest_out = ".";
  CLI::App* selftest = app.add_subcommand(
      "selftest", "Run the built-in invariant checks with a fixed seed");
  selftest->add_option("--out", selftest_out,
                       "Directory for selftest.csv and scratch runs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }
  convergence_flags.seed_given = convergence->count("--seed") > 0;
  smoothing_flags.seed_given = smoothing->count("--seed") > 0;
  reduce_flags.seed_given = reduce_cmd->count("--seed") > 0;

  try {
    if (convergence->parsed()) return run_convergence(convergence_flags);
    if (smoothing->parsed()) return run_smoothing(smoothing_flags);
    if (reduce_cmd->parsed()) return run_reduce(reduce_flags, rho);
    if (posterior->parsed()) return run_posterior(posterior_dir, posterior_out);
    if (selftest->parsed()) return run_selftest(selftest_out, std::cout);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.category() == ErrorCategory::Validation ? 1 : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  std::cerr << "error: no subcommand selected\n";
  return 1;
}

}  // namespace ekrmle
