// Microbenchmarks for the hot paths: ensemble updates across ensemble sizes,
// Lyapunov solves and balancing across state dimensions, and the dense
// forward-map assembly for the heat test system.

#include <benchmark/benchmark.h>

#include <Eigen/Dense>

#include "ekrmle/balanced_truncation.hpp"
#include "ekrmle/ensemble.hpp"
#include "ekrmle/experiments.hpp"
#include "ekrmle/inverse_problem.hpp"
#include "ekrmle/linalg.hpp"
#include "ekrmle/lti.hpp"
#include "ekrmle/mean_field.hpp"
#include "ekrmle/rng.hpp"

namespace {

void bm_eki_step(benchmark::State& state) {
  const Eigen::Index ensemble_size = state.range(0);
  const ekrmle::StreamKey key{7, 0};
  const ekrmle::RandomProblem generated = ekrmle::random_problem(50, 100, 25, key);
  const ekrmle::InverseProblem& problem = generated.problem;
  const ekrmle::Ensemble initial =
      ekrmle::initial_ensemble(*problem.prior, ensemble_size, key);
  const ekrmle::PerturbedData data = ekrmle::perturb_observations(
      problem.data, ekrmle::PerturbationScheme::fixed_rmle(problem.noise_cov),
      ensemble_size, key);
  for (auto _ : state) {
    ekrmle::Ensemble next = ekrmle::eki_step(problem, initial, data);
    benchmark::DoNotOptimize(next.particles.data());
  }
  state.SetItemsProcessed(state.iterations() * ensemble_size);
}
BENCHMARK(bm_eki_step)->Arg(50)->Arg(500)->Arg(5000);

void bm_mean_field_cov_iterate(benchmark::State& state) {
  const Eigen::Index d = state.range(0);
  const ekrmle::StreamKey key{11, 0};
  const ekrmle::RandomProblem generated =
      ekrmle::random_problem(d / 2, d, d / 4, key);
  const Eigen::MatrixXd h = generated.problem.op.materialize();
  for (auto _ : state) {
    const auto states = ekrmle::mean_field_cov_iterate(
        generated.problem.prior->cov, h, generated.problem.noise_cov, 20);
    benchmark::DoNotOptimize(states.back().covariance.data());
  }
}
BENCHMARK(bm_mean_field_cov_iterate)->Arg(40)->Arg(100)->Arg(200);

void bm_solve_lyapunov(benchmark::State& state) {
  const Eigen::Index d = state.range(0);
  ekrmle::RandomStream stream =
      ekrmle::StreamKey{13, 0}.stream(ekrmle::stream_tag::kProblemGeneration);
  const Eigen::MatrixXd g = stream.normal_matrix(d, d);
  const Eigen::MatrixXd skew = 0.5 * (g - g.transpose());
  const Eigen::MatrixXd s = stream.normal_matrix(d, d);
  const Eigen::MatrixXd a =
      skew - (s * s.transpose() / static_cast<double>(d) +
              0.4 * Eigen::MatrixXd::Identity(d, d));
  const Eigen::MatrixXd c = Eigen::MatrixXd::Identity(d, d);
  for (auto _ : state) {
    Eigen::MatrixXd x = ekrmle::solve_lyapunov(a, c);
    benchmark::DoNotOptimize(x.data());
  }
}
BENCHMARK(bm_solve_lyapunov)->Arg(50)->Arg(100)->Arg(200);

void bm_dense_forward_matrix(benchmark::State& state) {
  const int d = static_cast<int>(state.range(0));
  const ekrmle::LTISystem system = ekrmle::heat_model(d);
  for (auto _ : state) {
    Eigen::MatrixXd h = ekrmle::dense_forward_matrix(system);
    benchmark::DoNotOptimize(h.data());
  }
}
BENCHMARK(bm_dense_forward_matrix)->Arg(20)->Arg(50)->Unit(benchmark::kMillisecond);

void bm_balance_and_reduce(benchmark::State& state) {
  const int d = static_cast<int>(state.range(0));
  const ekrmle::LTISystem system = ekrmle::heat_model(d);
  const Eigen::MatrixXd prior_cov = ekrmle::prior_from_lyapunov(system.a);
  const Eigen::MatrixXd q = ekrmle::observability_gramian(system);
  for (auto _ : state) {
    const ekrmle::BalancingFactors factors = ekrmle::balance(q, prior_cov);
    const ekrmle::ReducedModel model = ekrmle::reduce(
        system, factors, std::min<Eigen::Index>(20, ekrmle::usable_order(factors)));
    benchmark::DoNotOptimize(model.a_hat.data());
  }
}
BENCHMARK(bm_balance_and_reduce)->Arg(50)->Arg(200)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
