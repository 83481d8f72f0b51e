#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <limits>
#include <vector>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include "ekrmle/csv.hpp"
#include "ekrmle/ensemble.hpp"
#include "ekrmle/errors.hpp"
#include "ekrmle/forward_operator.hpp"
#include "ekrmle/inverse_problem.hpp"
#include "ekrmle/mean_field.hpp"
#include "ekrmle/rng.hpp"
#include "test_support.hpp"

namespace {

using ekrmle::eigenvalue_recurrence;
using ekrmle::EigenvalueSequence;
using ekrmle::Ensemble;
using ekrmle::ForwardOperator;
using ekrmle::InverseProblem;
using ekrmle::mean_field_cov_iterate;
using ekrmle::mean_field_limits;
using ekrmle::MeanFieldLimits;
using ekrmle::MeanFieldState;
using ekrmle::ObsSpectral;
using ekrmle::PerturbationScheme;
using ekrmle::PerturbedData;
using ekrmle::RandomStream;
using ekrmle::StateSpectral;
using ekrmle::StreamKey;

// A rank-deficient test problem with SPD noise. The prior covariance has
// rank `c0_rank` so both convergent and frozen subspaces are nontrivial.
struct Instance {
  Eigen::MatrixXd c0;
  Eigen::MatrixXd h;
  Eigen::MatrixXd gamma;
};

Instance random_instance(RandomStream& stream, Eigen::Index n, Eigen::Index d,
                         Eigen::Index c0_rank) {
  Instance inst;
  inst.c0 = test_support::random_psd_rank(stream, d, c0_rank);
  inst.h = stream.normal_matrix(n, d);
  inst.gamma = test_support::random_spd(stream, n);
  return inst;
}

// Independent scalar oracle: the one-dimensional mean-field covariance
// iteration with H = Gamma = 1, tracked directly.
std::vector<double> scalar_covariance_oracle(double c0, int imax) {
  std::vector<double> lambda{c0};
  double product = 1.0;  // prod of (1 + c_k)^-1 for k < i
  for (int i = 0; i < imax; ++i) {
    product /= 1.0 + lambda.back();
    const double map = product;  // compound residual map at iteration i+1
    const double next = map * map * c0 + (1.0 - map) * (1.0 - map) * 1.0;
    lambda.push_back(next);
  }
  return lambda;
}

TEST(EigenvalueRecurrence, ZeroStaysZero) {
  const EigenvalueSequence seq = eigenvalue_recurrence(0.0, 20);
  for (double v : seq.lambda) EXPECT_EQ(v, 0.0);
}

TEST(EigenvalueRecurrence, UnitSeedHandValues) {
  const EigenvalueSequence seq = eigenvalue_recurrence(1.0, 5);
  EXPECT_NEAR(seq.lambda[1], 0.5, 1e-15);
  EXPECT_NEAR(seq.lambda[2], 5.0 / 9.0, 1e-15);
}

TEST(EigenvalueRecurrence, MatchesScalarCovarianceIteration) {
  RandomStream stream(60);
  for (int trial = 0; trial < 10; ++trial) {
    const double lambda0 = 10.0 * stream.uniform();
    const EigenvalueSequence seq = eigenvalue_recurrence(lambda0, 30);
    const std::vector<double> oracle = scalar_covariance_oracle(lambda0, 30);
    for (int i = 0; i <= 30; ++i)
      EXPECT_NEAR(seq.lambda[i], oracle[i], 1e-12) << "i=" << i;
  }
}

TEST(EigenvalueRecurrence, StrictlyIncreasingAndBoundedByOne) {
  RandomStream stream(61);
  for (int trial = 0; trial < 30; ++trial) {
    const double lambda0 = 10.0 * stream.uniform() + 1e-6;
    const EigenvalueSequence seq = eigenvalue_recurrence(lambda0, 200);
    for (int i = 1; i <= 200; ++i) {
      EXPECT_LE(seq.lambda[i], 1.0 + 1e-15);
      if (i >= 2 && seq.complement[i - 1] > 1e-14) {
        EXPECT_GT(seq.lambda[i], seq.lambda[i - 1])
            << "lambda0=" << lambda0 << " i=" << i;
      }
      // The stable gap never goes negative and matches 1 - lambda.
      EXPECT_GE(seq.complement[i], 0.0);
      EXPECT_NEAR(seq.complement[i], 1.0 - seq.lambda[i], 1e-12);
    }
  }
}

TEST(EigenvalueRecurrence, PreservesOrderingOfSeeds) {
  RandomStream stream(62);
  for (int trial = 0; trial < 20; ++trial) {
    const double small = 9.0 * stream.uniform() + 0.01;
    const double large = small + stream.uniform() + 0.05;
    const EigenvalueSequence lo = eigenvalue_recurrence(small, 200);
    const EigenvalueSequence hi = eigenvalue_recurrence(large, 200);
    for (int i = 1; i <= 200; ++i) {
      if (lo.complement[i] < 1e-300) break;  // both gaps below resolution
      EXPECT_LT(hi.complement[i], lo.complement[i])
          << "small=" << small << " large=" << large << " i=" << i;
    }
  }
}

TEST(EigenvalueRecurrence, RejectsNegativeSeed) {
  EXPECT_THROW(eigenvalue_recurrence(-0.5, 10), ekrmle::PreconditionError);
}

TEST(RateBound, HandValuesAndExponent) {
  EXPECT_NEAR(ekrmle::rate_exponent(1.0), 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(ekrmle::rate_bound(1.0, 1), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(ekrmle::rate_bound(1.0, 4), (2.0 / 3.0) * std::exp(-1.0), 1e-15);
  EXPECT_THROW(ekrmle::rate_bound(0.0, 1), ekrmle::PreconditionError);
}

TEST(RateBound, DominatesRecurrenceGap) {
  RandomStream stream(63);
  for (int trial = 0; trial < 100; ++trial) {
    const double lambda0 = 10.0 * stream.uniform() + 1e-9;
    const EigenvalueSequence seq = eigenvalue_recurrence(lambda0, 201);
    for (int i = 1; i <= 200; ++i) {
      EXPECT_LE(seq.complement[i + 1], ekrmle::rate_bound(lambda0, i))
          << "lambda0=" << lambda0 << " i=" << i;
    }
  }
}

TEST(StateEigenproblem, HandExamples) {
  Eigen::MatrixXd c0 = Eigen::MatrixXd::Zero(2, 2);
  c0(0, 0) = 2.0;
  const StateSpectral rank_one = ekrmle::state_eigenproblem(
      c0, Eigen::MatrixXd::Identity(2, 2), Eigen::MatrixXd::Identity(2, 2));
  EXPECT_EQ(rank_one.rank, 1);
  EXPECT_NEAR(rank_one.eigenvalues(0), 2.0, 1e-12);
  EXPECT_NEAR(std::abs(rank_one.basis(0, 0)), 1.0, 1e-12);
  EXPECT_NEAR(std::abs(rank_one.basis(1, 0)), 0.0, 1e-12);
  Eigen::MatrixXd p_expected = Eigen::MatrixXd::Zero(2, 2);
  p_expected(0, 0) = 1.0;
  EXPECT_LE(test_support::rel_err(rank_one.projector, p_expected), 1e-10);

  const StateSpectral full = ekrmle::state_eigenproblem(
      Eigen::MatrixXd::Identity(3, 3), Eigen::MatrixXd::Identity(3, 3),
      Eigen::MatrixXd::Identity(3, 3));
  EXPECT_EQ(full.rank, 3);
  EXPECT_LE((full.eigenvalues.array() - 1.0).abs().maxCoeff(), 1e-12);
  EXPECT_LE(
      test_support::rel_err(full.projector, Eigen::MatrixXd::Identity(3, 3)),
      1e-10);
}

TEST(StateEigenproblem, ResidualAndNormalizationOnRandomInstance) {
  RandomStream stream(64);
  const Instance inst = random_instance(stream, 5, 8, 4);
  const StateSpectral spectral =
      ekrmle::state_eigenproblem(inst.c0, inst.h, inst.gamma);
  const Eigen::MatrixXd weighted =
      inst.h.transpose() * inst.gamma.inverse() * inst.h;
  const Eigen::MatrixXd operator_matrix = inst.c0 * weighted;

  const Eigen::MatrixXd residual =
      operator_matrix * spectral.basis -
      spectral.basis * spectral.eigenvalues.asDiagonal();
  EXPECT_LE(ekrmle::spectral_norm(residual),
            1e-8 * std::max(1.0, ekrmle::spectral_norm(operator_matrix)));

  const Eigen::MatrixXd gram =
      spectral.basis.transpose() * weighted * spectral.basis;
  EXPECT_LE(test_support::rel_err(
                gram, Eigen::MatrixXd::Identity(spectral.rank, spectral.rank)),
            1e-10);
}

TEST(ObsEigenproblem, HandExamplesAndEigenvalueAgreement) {
  const ObsSpectral full = ekrmle::obs_eigenproblem(
      Eigen::MatrixXd::Identity(3, 3), Eigen::MatrixXd::Identity(3, 3),
      Eigen::MatrixXd::Identity(3, 3));
  EXPECT_EQ(full.rank, 3);
  EXPECT_LE((full.eigenvalues.array() - 1.0).abs().maxCoeff(), 1e-12);
  EXPECT_LE(
      test_support::rel_err(full.projector, Eigen::MatrixXd::Identity(3, 3)),
      1e-10);

  const ObsSpectral empty = ekrmle::obs_eigenproblem(
      Eigen::MatrixXd::Zero(4, 4), Eigen::MatrixXd::Identity(3, 4),
      Eigen::MatrixXd::Identity(3, 3));
  EXPECT_EQ(empty.rank, 0);
  EXPECT_LE(ekrmle::spectral_norm(empty.projector), 1e-12);
  EXPECT_LE(test_support::rel_err(empty.complement,
                                  Eigen::MatrixXd::Identity(3, 3)),
            1e-12);

  // Nonzero eigenvalues of the state and observation problems coincide.
  RandomStream stream(65);
  for (int trial = 0; trial < 5; ++trial) {
    const Instance inst = random_instance(stream, 6, 9, 4);
    const StateSpectral state =
        ekrmle::state_eigenproblem(inst.c0, inst.h, inst.gamma);
    const ObsSpectral obs =
        ekrmle::obs_eigenproblem(inst.c0, inst.h, inst.gamma);
    ASSERT_EQ(state.rank, obs.rank);
    for (Eigen::Index l = 0; l < state.rank; ++l)
      EXPECT_NEAR(state.eigenvalues(l), obs.eigenvalues(l),
                  1e-8 * std::max(1.0, state.eigenvalues(0)));
  }

  // The pencil residual H C0 H^T W = Gamma W diag(lambda).
  const Instance inst = random_instance(stream, 6, 9, 4);
  const ObsSpectral obs = ekrmle::obs_eigenproblem(inst.c0, inst.h, inst.gamma);
  const Eigen::MatrixXd lhs =
      inst.h * inst.c0 * inst.h.transpose() * obs.basis;
  const Eigen::MatrixXd rhs =
      inst.gamma * obs.basis * obs.eigenvalues.asDiagonal();
  EXPECT_LE(ekrmle::spectral_norm(lhs - rhs),
            1e-8 * std::max(1.0, ekrmle::spectral_norm(
                                     inst.h * inst.c0 * inst.h.transpose())));
}

TEST(Projectors, AlgebraIdentities) {
  RandomStream stream(66);
  for (int trial = 0; trial < 10; ++trial) {
    const Instance inst = random_instance(stream, 6, 10, 5);
    const StateSpectral state =
        ekrmle::state_eigenproblem(inst.c0, inst.h, inst.gamma);
    const ObsSpectral obs =
        ekrmle::obs_eigenproblem(inst.c0, inst.h, inst.gamma);
    const Eigen::MatrixXd id_d = Eigen::MatrixXd::Identity(10, 10);
    const Eigen::MatrixXd id_n = Eigen::MatrixXd::Identity(6, 6);

    const auto near_zero = [](const Eigen::MatrixXd& m) {
      return ekrmle::spectral_norm(m) <= 1e-8;
    };
    EXPECT_TRUE(near_zero(state.projector * state.projector - state.projector));
    EXPECT_TRUE(
        near_zero(state.complement * state.complement - state.complement));
    EXPECT_TRUE(near_zero(state.projector * state.complement));
    EXPECT_TRUE(near_zero(state.complement * state.projector));
    EXPECT_TRUE(near_zero(state.projector + state.complement - id_d));

    EXPECT_TRUE(near_zero(obs.projector * obs.projector - obs.projector));
    EXPECT_TRUE(near_zero(obs.complement * obs.complement - obs.complement));
    EXPECT_TRUE(near_zero(obs.projector * obs.complement));
    EXPECT_TRUE(near_zero(obs.complement * obs.projector));
    EXPECT_TRUE(near_zero(obs.projector + obs.complement - id_n));
  }
}

TEST(MeanFieldIteration, ZeroCovarianceIsFixed) {
  const std::vector<MeanFieldState> states = mean_field_cov_iterate(
      Eigen::MatrixXd::Zero(4, 4), Eigen::MatrixXd::Identity(3, 4),
      Eigen::MatrixXd::Identity(3, 3), 5);
  ASSERT_EQ(states.size(), 6u);
  for (const MeanFieldState& state : states) {
    EXPECT_LE(state.covariance.norm(), 1e-14);
    EXPECT_LE(test_support::rel_err(state.state_map,
                                    Eigen::MatrixXd::Identity(4, 4)),
              1e-12);
    EXPECT_LE(test_support::rel_err(state.obs_map,
                                    Eigen::MatrixXd::Identity(3, 3)),
              1e-12);
  }
}

TEST(MeanFieldIteration, ScalarUnitCaseHalvesEigenvalue) {
  const std::vector<MeanFieldState> states = mean_field_cov_iterate(
      Eigen::MatrixXd::Identity(1, 1), Eigen::MatrixXd::Identity(1, 1),
      Eigen::MatrixXd::Identity(1, 1), 2);
  EXPECT_NEAR(states[1].covariance(0, 0), 0.5, 1e-14);
  EXPECT_NEAR(states[2].covariance(0, 0), 5.0 / 9.0, 1e-14);
}

TEST(MeanFieldIteration, EigenvaluesFollowRecurrence) {
  RandomStream stream(67);
  for (int trial = 0; trial < 5; ++trial) {
    const Instance inst = random_instance(stream, 6, 6, trial % 2 ? 6 : 3);
    const StateSpectral initial =
        ekrmle::state_eigenproblem(inst.c0, inst.h, inst.gamma);
    std::vector<EigenvalueSequence> tracks;
    for (Eigen::Index l = 0; l < initial.rank; ++l)
      tracks.push_back(eigenvalue_recurrence(initial.eigenvalues(l), 50));

    const std::vector<MeanFieldState> states =
        mean_field_cov_iterate(inst.c0, inst.h, inst.gamma, 50);
    for (int i = 0; i <= 50; ++i) {
      const StateSpectral current =
          ekrmle::state_eigenproblem(states[i].covariance, inst.h, inst.gamma);
      ASSERT_GE(current.rank, initial.rank);
      for (Eigen::Index l = 0; l < initial.rank; ++l)
        EXPECT_NEAR(current.eigenvalues(l), tracks[l].lambda[i], 1e-10)
            << "trial=" << trial << " i=" << i << " l=" << l;
    }
  }
}

TEST(MeanFieldIteration, CovarianceStaysSymmetricPsdAndMapsIntertwine) {
  RandomStream stream(68);
  const Instance inst = random_instance(stream, 5, 9, 4);
  const std::vector<MeanFieldState> states =
      mean_field_cov_iterate(inst.c0, inst.h, inst.gamma, 20);
  for (const MeanFieldState& state : states) {
    EXPECT_LE(
        ekrmle::spectral_norm(state.covariance - state.covariance.transpose()),
        1e-10 * std::max(1.0, ekrmle::spectral_norm(state.covariance)));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(state.covariance);
    EXPECT_GE(eig.eigenvalues().minCoeff(),
              -1e-10 * std::max(1.0, eig.eigenvalues().maxCoeff()));

    const Eigen::MatrixXd lhs = inst.h * state.state_map;
    const Eigen::MatrixXd rhs = state.obs_map * inst.h;
    EXPECT_LE(ekrmle::spectral_norm(lhs - rhs),
              1e-8 * std::max(1.0, ekrmle::spectral_norm(rhs)));
  }
}

TEST(MeanFieldIteration, ProjectorsCommuteWithCompoundMaps) {
  RandomStream stream(69);
  const Instance inst = random_instance(stream, 6, 10, 5);
  const StateSpectral state =
      ekrmle::state_eigenproblem(inst.c0, inst.h, inst.gamma);
  const ObsSpectral obs = ekrmle::obs_eigenproblem(inst.c0, inst.h, inst.gamma);
  const std::vector<MeanFieldState> states =
      mean_field_cov_iterate(inst.c0, inst.h, inst.gamma, 20);
  for (int i : {1, 5, 20}) {
    const Eigen::MatrixXd& m = states[i].state_map;
    EXPECT_LE(ekrmle::spectral_norm(state.projector * m - m * state.projector),
              1e-8);
    const Eigen::MatrixXd& mo = states[i].obs_map;
    EXPECT_LE(ekrmle::spectral_norm(obs.projector * mo - mo * obs.projector),
              1e-8);
  }
}

TEST(MeanFieldIteration, EigenvectorSubspaceIsConstant) {
  RandomStream stream(70);
  const Instance inst = random_instance(stream, 6, 9, 4);
  const StateSpectral initial =
      ekrmle::state_eigenproblem(inst.c0, inst.h, inst.gamma);
  const Eigen::MatrixXd q0 = test_support::orthonormal_range(initial.basis);
  const std::vector<MeanFieldState> states =
      mean_field_cov_iterate(inst.c0, inst.h, inst.gamma, 8);
  for (int i : {1, 4, 8}) {
    const StateSpectral current =
        ekrmle::state_eigenproblem(states[i].covariance, inst.h, inst.gamma);
    ASSERT_EQ(current.rank, initial.rank);
    const Eigen::MatrixXd qi = test_support::orthonormal_range(current.basis);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(q0.transpose() * qi);
    // All principal-angle cosines are 1: the spanned subspace never moves.
    EXPECT_GE(svd.singularValues().minCoeff(), 1.0 - 5e-13) << "i=" << i;
  }
}

TEST(MeanFieldIteration, CompoundObsMapMatchesSpectralReconstruction) {
  RandomStream stream(71);
  const Instance inst = random_instance(stream, 6, 10, 5);
  const ObsSpectral obs = ekrmle::obs_eigenproblem(inst.c0, inst.h, inst.gamma);
  const std::vector<MeanFieldState> states =
      mean_field_cov_iterate(inst.c0, inst.h, inst.gamma, 12);

  std::vector<EigenvalueSequence> tracks;
  for (Eigen::Index l = 0; l < obs.rank; ++l)
    tracks.push_back(eigenvalue_recurrence(obs.eigenvalues(l), 12));

  for (int i : {1, 3, 10}) {
    Eigen::MatrixXd reconstructed = obs.complement;
    for (Eigen::Index l = 0; l < obs.rank; ++l) {
      double coeff = 1.0;
      for (int k = 0; k < i; ++k) coeff /= 1.0 + tracks[l].lambda[k];
      reconstructed += coeff * inst.gamma * obs.basis.col(l) *
                       obs.basis.col(l).transpose();
    }
    EXPECT_LE(ekrmle::spectral_norm(states[i].obs_map - reconstructed),
              1e-8 * std::max(1.0, ekrmle::spectral_norm(states[i].obs_map)))
        << "i=" << i;
  }
}

TEST(MeanFieldIteration, CompoundObsMapConvergesToComplement) {
  RandomStream stream(72);
  const Instance inst = random_instance(stream, 5, 8, 4);
  const ObsSpectral obs = ekrmle::obs_eigenproblem(inst.c0, inst.h, inst.gamma);
  double gamma_rate = std::numeric_limits<double>::infinity();
  for (Eigen::Index l = 0; l < obs.rank; ++l)
    gamma_rate = std::min(gamma_rate,
                          ekrmle::rate_exponent(obs.eigenvalues(l)));

  const int imax = 300;
  const std::vector<MeanFieldState> states =
      mean_field_cov_iterate(inst.c0, inst.h, inst.gamma, imax);
  const double initial_gap =
      ekrmle::spectral_norm(states[1].obs_map - obs.complement);
  const int predicted =
      1 + static_cast<int>(std::ceil(
              (std::log(std::max(initial_gap, 1.0) *
                        static_cast<double>(obs.rank)) +
               6.0 * std::log(10.0)) /
              gamma_rate));
  ASSERT_LE(predicted, imax);
  EXPECT_LE(ekrmle::spectral_norm(states[predicted].obs_map - obs.complement),
            1e-6)
      << "predicted iteration " << predicted;
}

// Limits under H = I with a full-rank prior: every particle limit is its
// own perturbed data vector.
TEST(MeanFieldLimits, FullRankIdentityCaseHitsData) {
  RandomStream stream(73);
  const Eigen::Index d = 4, ensemble_size = 6;
  const InverseProblem problem{
      ForwardOperator::dense(Eigen::MatrixXd::Identity(d, d)),
      Eigen::MatrixXd::Identity(d, d), stream.normal_vector(d), std::nullopt};
  const Ensemble init =
      ekrmle::initial_ensemble(stream.normal_matrix(d, ensemble_size));
  const PerturbedData data = ekrmle::perturb_observations(
      problem.data, PerturbationScheme::fixed_rmle(problem.noise_cov),
      ensemble_size, StreamKey{20, 0});
  const MeanFieldLimits limits = mean_field_limits(
      problem, init, data, Eigen::VectorXd::Zero(d),
      Eigen::MatrixXd::Identity(d, d));
  EXPECT_LE(test_support::rel_err(limits.state.projector,
                                  Eigen::MatrixXd::Identity(d, d)),
            1e-10);
  EXPECT_LE(test_support::rel_err(limits.state_particles, data.perturbed),
            1e-10);
}

TEST(MeanFieldLimits, ZeroPriorCovarianceFreezesEverything) {
  RandomStream stream(74);
  const Eigen::Index d = 4, ensemble_size = 5;
  const InverseProblem problem{
      ForwardOperator::dense(stream.normal_matrix(3, d)),
      Eigen::MatrixXd::Identity(3, 3), stream.normal_vector(3), std::nullopt};
  const Eigen::MatrixXd particles = stream.normal_matrix(d, ensemble_size);
  const Ensemble init = ekrmle::initial_ensemble(particles);
  const PerturbedData data = ekrmle::perturb_observations(
      problem.data, PerturbationScheme::fixed_rmle(problem.noise_cov),
      ensemble_size, StreamKey{21, 0});
  const MeanFieldLimits limits =
      mean_field_limits(problem, init, data, Eigen::VectorXd::Zero(d),
                        Eigen::MatrixXd::Zero(d, d));
  EXPECT_EQ(limits.state.rank, 0);
  EXPECT_LE(test_support::rel_err(limits.state_particles, particles), 1e-12);
}

TEST(MeanFieldLimits, RejectsPerIterationData) {
  RandomStream stream(75);
  const InverseProblem problem{
      ForwardOperator::dense(Eigen::MatrixXd::Identity(3, 3)),
      Eigen::MatrixXd::Identity(3, 3), stream.normal_vector(3), std::nullopt};
  const Ensemble init = ekrmle::initial_ensemble(stream.normal_matrix(3, 4));
  PerturbedData data = ekrmle::perturb_observations(
      problem.data, PerturbationScheme::per_iteration(problem.noise_cov), 4,
      StreamKey{22, 0});
  EXPECT_THROW(mean_field_limits(problem, init, data),
               ekrmle::PreconditionError);
}

TEST(MeanFieldLimits, SolutionsAndMomentsMatchClosedForms) {
  RandomStream stream(76);
  const Eigen::Index n = 6, d = 10, ensemble_size = 8;
  const Instance inst = random_instance(stream, n, d, 5);
  const InverseProblem problem{ForwardOperator::dense(inst.h), inst.gamma,
                               stream.normal_vector(n), std::nullopt};
  const Ensemble init =
      ekrmle::initial_ensemble(stream.normal_matrix(d, ensemble_size));
  const PerturbedData data = ekrmle::perturb_observations(
      problem.data, PerturbationScheme::fixed_rmle(inst.gamma), ensemble_size,
      StreamKey{23, 0});
  const Eigen::VectorXd mean0 = stream.normal_vector(d);
  const MeanFieldLimits limits =
      mean_field_limits(problem, init, data, mean0, inst.c0);

  // Per-particle weighted least-squares solutions.
  for (Eigen::Index j = 0; j < ensemble_size; ++j) {
    const Eigen::VectorXd direct = ekrmle::minimum_norm_solution(
        inst.h, inst.gamma, data.perturbed.col(j));
    EXPECT_LE((limits.rls_solutions.col(j) - direct).norm(),
              1e-12 * (1.0 + direct.norm()));
  }

  // Limit particles combine the convergent part of the solution with the
  // frozen part of the initial state.
  const Eigen::MatrixXd expected_particles =
      limits.state.projector * limits.rls_solutions +
      limits.state.complement * init.particles;
  EXPECT_LE(test_support::rel_err(limits.state_particles, expected_particles),
            1e-10);

  // Limit moments per the closed forms.
  const ekrmle::WeightedPseudoinverse pinv(inst.h, inst.gamma);
  const Eigen::MatrixXd expected_cov =
      limits.state.projector * pinv.normal_pseudoinverse() *
          limits.state.projector.transpose() +
      limits.state.complement * inst.c0 * limits.state.complement.transpose();
  EXPECT_LE(test_support::rel_err(limits.state_cov, expected_cov), 1e-10);

  const Eigen::VectorXd expected_mean =
      limits.state.projector * limits.rls_solution +
      limits.state.complement * mean0;
  EXPECT_LE((limits.state_mean - expected_mean).norm(),
            1e-10 * (1.0 + expected_mean.norm()));

  // Observation-space limits are the forward images of the state limits.
  EXPECT_LE(test_support::rel_err(Eigen::MatrixXd(inst.h *
                                                  limits.state_particles),
                                  limits.obs_particles),
            1e-8);
}

// Applying the limits to the prior-augmented problem with a full-rank prior
// recovers the exact Gaussian posterior.
TEST(MeanFieldLimits, AugmentedProblemRecoversPosterior) {
  RandomStream stream(77);
  const Eigen::Index n = 9, d = 6, ensemble_size = 7;
  InverseProblem problem{ForwardOperator::dense(stream.normal_matrix(n, d)),
                         test_support::random_spd(stream, n),
                         stream.normal_vector(n), std::nullopt};
  problem.prior = ekrmle::GaussianPrior{stream.normal_vector(d),
                                        test_support::random_spd(stream, d)};
  const ekrmle::GaussianPosterior posterior = ekrmle::exact_posterior(problem);
  const InverseProblem augmented = ekrmle::augment_rls(problem);

  const Ensemble init =
      ekrmle::initial_ensemble(*problem.prior, ensemble_size, StreamKey{24, 0});
  const PerturbedData data = ekrmle::perturb_observations(
      augmented.data, PerturbationScheme::fixed_rmle(augmented.noise_cov),
      ensemble_size, StreamKey{24, 0});
  const MeanFieldLimits limits = mean_field_limits(
      augmented, init, data, problem.prior->mean, problem.prior->cov);

  EXPECT_LE(test_support::rel_err(limits.state.projector,
                                  Eigen::MatrixXd::Identity(d, d)),
            1e-10);
  EXPECT_LE((limits.state_mean - posterior.mean).norm(),
            1e-10 * (1.0 + posterior.mean.norm()));
  EXPECT_LE(test_support::rel_err(limits.state_cov, posterior.cov), 1e-10);
}

TEST(ProjectedSeries, InitialIterationMatchesDirectProjection) {
  RandomStream stream(78);
  const Eigen::Index n = 5, d = 8, ensemble_size = 6;
  const Instance inst = random_instance(stream, n, d, 4);
  const InverseProblem problem{ForwardOperator::dense(inst.h), inst.gamma,
                               stream.normal_vector(n), std::nullopt};
  const Eigen::MatrixXd particles = stream.normal_matrix(d, ensemble_size);
  const Ensemble init = ekrmle::initial_ensemble(particles);
  const PerturbedData data = ekrmle::perturb_observations(
      problem.data, PerturbationScheme::fixed_rmle(inst.gamma), ensemble_size,
      StreamKey{25, 0});
  const MeanFieldLimits limits =
      mean_field_limits(problem, init, data, Eigen::VectorXd::Zero(d),
                        inst.c0);

  ekrmle::ProjectedSeriesAccumulator accumulator(limits, data.perturbed);
  accumulator.append(0, particles, inst.h * particles);
  const ekrmle::ProjectedSeries& series = accumulator.series();
  ASSERT_EQ(series.state_p_norms.size(), 1u);
  for (Eigen::Index j = 0; j < ensemble_size; ++j) {
    const double direct =
        (limits.state.projector *
         (particles.col(j) - limits.rls_solutions.col(j)))
            .norm();
    EXPECT_NEAR(series.state_p_norms[0](j), direct,
                1e-12 * (1.0 + direct));
  }
}

TEST(ProjectedSeries, MeanFieldTrajectoryHasConstantFrozenPart) {
  RandomStream stream(79);
  const Eigen::Index n = 6, d = 10, ensemble_size = 5;
  const Instance inst = random_instance(stream, n, d, 5);
  const InverseProblem problem{ForwardOperator::dense(inst.h), inst.gamma,
                               stream.normal_vector(n), std::nullopt};
  const Eigen::MatrixXd particles = stream.normal_matrix(d, ensemble_size);
  const Ensemble init = ekrmle::initial_ensemble(particles);
  const PerturbedData data = ekrmle::perturb_observations(
      problem.data, PerturbationScheme::fixed_rmle(inst.gamma), ensemble_size,
      StreamKey{26, 0});
  const MeanFieldLimits limits =
      mean_field_limits(problem, init, data, Eigen::VectorXd::Zero(d),
                        inst.c0);
  const std::vector<MeanFieldState> states =
      mean_field_cov_iterate(inst.c0, inst.h, inst.gamma, 50);

  const ekrmle::ProjectedSeries series = ekrmle::projected_residual_series(
      states, problem, particles, data, limits);
  ASSERT_EQ(series.iterations.size(), 51u);
  for (Eigen::Index j = 0; j < ensemble_size; ++j) {
    const double s0 = series.state_s_norms[0](j);
    const double s50 = series.state_s_norms[50](j);
    EXPECT_NEAR(s50, s0, 1e-8 * (s0 + 1e-30));
    const double o0 = series.obs_s_norms[0](j);
    const double o50 = series.obs_s_norms[50](j);
    EXPECT_NEAR(o50, o0, 1e-8 * (o0 + 1e-30));
  }

  // The convergent projections decay geometrically at the min-rate bound.
  const ekrmle::StateSpectral state =
      ekrmle::state_eigenproblem(inst.c0, inst.h, inst.gamma);
  double gamma_rate = std::numeric_limits<double>::infinity();
  for (Eigen::Index l = 0; l < state.rank; ++l)
    gamma_rate = std::min(gamma_rate,
                          ekrmle::rate_exponent(state.eigenvalues(l)));
  for (int i = 1; i <= 50; ++i) {
    const double bound = std::exp(-(i - 1) * gamma_rate);
    for (Eigen::Index j = 0; j < ensemble_size; ++j) {
      EXPECT_LE(series.state_p_norms[i](j),
                bound * series.state_p_norms[0](j) + 1e-14)
          << "i=" << i;
    }
  }
}

TEST(ProjectedSeries, TraceBasedSeriesMatchesAccumulator) {
  RandomStream stream(80);
  const Eigen::Index n = 4, d = 7, ensemble_size = 5;
  const Instance inst = random_instance(stream, n, d, 3);
  const InverseProblem problem{ForwardOperator::dense(inst.h), inst.gamma,
                               stream.normal_vector(n), std::nullopt};
  const Ensemble init =
      ekrmle::initial_ensemble(stream.normal_matrix(d, ensemble_size));
  const StreamKey key{27, 0};
  const PerturbationScheme scheme = PerturbationScheme::fixed_rmle(inst.gamma);
  ekrmle::StoppingRule stop;
  stop.max_iterations = 5;
  stop.rel_step_tol = 0.0;

  const PerturbedData data = ekrmle::perturb_observations(
      problem.data, scheme, ensemble_size, key, 0);
  const MeanFieldLimits limits = mean_field_limits(problem, init, data);

  ekrmle::ProjectedSeriesAccumulator accumulator(limits, data.perturbed);
  ekrmle::TraceOptions options;
  options.snapshot_iterations = {0, 1, 2, 3, 4, 5};
  const ekrmle::RunTrace trace = ekrmle::run(
      problem, init, scheme, stop, key, options,
      [&accumulator](const Ensemble& ensemble,
                     const Eigen::MatrixXd& forward_values) {
        accumulator.append(ensemble.iteration, ensemble.particles,
                           forward_values);
      });

  const ekrmle::ProjectedSeries from_trace =
      ekrmle::projected_residual_series(trace, problem, limits);
  const ekrmle::ProjectedSeries& from_observer = accumulator.series();
  ASSERT_EQ(from_trace.iterations.size(), from_observer.iterations.size());
  for (std::size_t i = 0; i < from_trace.iterations.size(); ++i) {
    EXPECT_NEAR(from_trace.state_p_mean_rel[i],
                from_observer.state_p_mean_rel[i], 1e-12);
    EXPECT_NEAR(from_trace.obs_p_cov_rel[i], from_observer.obs_p_cov_rel[i],
                1e-12);
  }
}

TEST(SpectralExport, CsvAgreesWithRecurrence) {
  RandomStream stream(81);
  Eigen::VectorXd eigenvalues(3);
  eigenvalues << 2.5, 1.0, 0.3;
  const auto dir = test_support::temp_dir("spectral");
  const auto path = dir / "spectral.csv";
  ekrmle::export_spectral_csv(eigenvalues, 10, path.string());
  const ekrmle::CsvTable table = ekrmle::read_csv(path);
  ASSERT_EQ(table.rows.size(), 3u);
  for (int l = 0; l < 3; ++l) {
    const EigenvalueSequence seq = eigenvalue_recurrence(eigenvalues(l), 10);
    EXPECT_EQ(std::strtod(table.rows[l][1].c_str(), nullptr),
              ekrmle::rate_exponent(eigenvalues(l)));
    for (int i = 0; i <= 10; ++i)
      EXPECT_EQ(std::strtod(table.rows[l][2 + i].c_str(), nullptr),
                seq.lambda[i]);
  }
  std::filesystem::remove_all(dir);
}

}  // namespace
