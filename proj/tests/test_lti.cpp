#include <cmath>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <gtest/gtest.h>

#include "ekrmle/errors.hpp"
#include "ekrmle/forward_operator.hpp"
#include "ekrmle/lti.hpp"
#include "ekrmle/rng.hpp"
#include "test_support.hpp"

namespace {

using ekrmle::ForwardOperator;
using ekrmle::LTISystem;
using ekrmle::RandomStream;
using ekrmle::StreamKey;

LTISystem scalar_system(double a, double dt, std::vector<double> times) {
  LTISystem system;
  system.a = Eigen::MatrixXd::Constant(1, 1, a);
  system.f = Eigen::MatrixXd::Identity(1, 1);
  system.dt = dt;
  system.obs_times = std::move(times);
  system.eta_cov = Eigen::MatrixXd::Zero(1, 1);
  return system;
}

TEST(Simulate, ZeroDynamicsHoldsState) {
  LTISystem system;
  system.a = Eigen::MatrixXd::Zero(3, 3);
  system.f = Eigen::MatrixXd::Identity(3, 3);
  system.dt = 0.5;
  system.obs_times = {0.5, 1.0, 2.5};
  system.eta_cov = Eigen::MatrixXd::Zero(3, 3);
  Eigen::VectorXd x0(3);
  x0 << 1.0, -2.0, 0.25;
  const Eigen::MatrixXd trajectory = ekrmle::simulate(system, x0);
  ASSERT_EQ(trajectory.cols(), 3);
  for (int k = 0; k < 3; ++k) EXPECT_EQ(trajectory.col(k), x0);
}

TEST(Simulate, ScalarEulerStepsExactly) {
  // One Euler step multiplies by 1 + dt a = 0.25.
  const LTISystem system = scalar_system(-3.0, 0.25, {0.25, 0.5});
  const Eigen::MatrixXd trajectory =
      ekrmle::simulate(system, Eigen::VectorXd::Constant(1, 8.0));
  EXPECT_DOUBLE_EQ(trajectory(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(trajectory(0, 1), 0.5);
}

TEST(Simulate, DiagonalSystemDecouples) {
  LTISystem system;
  system.a = Eigen::Vector2d(-1.0, -4.0).asDiagonal();
  system.f = Eigen::MatrixXd::Identity(2, 2);
  system.dt = 0.125;
  system.obs_times = {0.125, 0.375};
  system.eta_cov = Eigen::MatrixXd::Zero(2, 2);
  Eigen::VectorXd x0(2);
  x0 << 2.0, 3.0;
  const Eigen::MatrixXd trajectory = ekrmle::simulate(system, x0);
  const double g0 = 1.0 - 0.125;
  const double g1 = 1.0 - 0.5;
  EXPECT_NEAR(trajectory(0, 0), 2.0 * g0, 1e-14);
  EXPECT_NEAR(trajectory(1, 0), 3.0 * g1, 1e-14);
  EXPECT_NEAR(trajectory(0, 1), 2.0 * g0 * g0 * g0, 1e-14);
  EXPECT_NEAR(trajectory(1, 1), 3.0 * g1 * g1 * g1, 1e-14);
}

TEST(Simulate, RejectsWrongInitialStateSize) {
  const LTISystem system = scalar_system(-1.0, 0.1, {0.1});
  EXPECT_THROW(ekrmle::simulate(system, Eigen::VectorXd::Zero(2)),
               ekrmle::ShapeError);
}

TEST(Simulate, UnstableSchemeRaisesInstabilityWithSuggestedStep) {
  const LTISystem system = scalar_system(-1000.0, 1.0, {200.0});
  try {
    ekrmle::simulate(system, Eigen::VectorXd::Constant(1, 1.0));
    FAIL() << "expected InstabilityError";
  } catch (const ekrmle::InstabilityError& err) {
    EXPECT_GT(err.step(), 0);
    EXPECT_LE(err.step(), 200);
    EXPECT_NEAR(err.suggested_dt(), 1.0 / 1000.0, 1e-12);
    EXPECT_EQ(err.category(), ekrmle::ErrorCategory::Numerical);
  }
}

TEST(Validate, RejectsMalformedSystems) {
  const LTISystem good = scalar_system(-1.0, 0.1, {0.1, 0.2});
  EXPECT_NO_THROW(ekrmle::validate(good));

  LTISystem bad = good;
  bad.a = Eigen::MatrixXd::Zero(2, 3);
  EXPECT_THROW(ekrmle::validate(bad), ekrmle::ShapeError);

  bad = good;
  bad.f = Eigen::MatrixXd::Zero(1, 2);
  EXPECT_THROW(ekrmle::validate(bad), ekrmle::ShapeError);

  bad = good;
  bad.dt = 0.0;
  EXPECT_THROW(ekrmle::validate(bad), ekrmle::PreconditionError);

  bad = good;
  bad.obs_times = {};
  EXPECT_THROW(ekrmle::validate(bad), ekrmle::PreconditionError);

  bad = good;
  bad.obs_times = {0.2, 0.1};
  EXPECT_THROW(ekrmle::validate(bad), ekrmle::PreconditionError);

  bad = good;
  bad.obs_times = {-0.1};
  EXPECT_THROW(ekrmle::validate(bad), ekrmle::PreconditionError);

  bad = good;
  bad.obs_times = {0.05};  // not a multiple of dt = 0.1
  EXPECT_THROW(ekrmle::validate(bad), ekrmle::PreconditionError);

  bad = good;
  bad.eta_cov = Eigen::MatrixXd::Zero(2, 2);
  EXPECT_THROW(ekrmle::validate(bad), ekrmle::ShapeError);
}

TEST(ObservationSteps, RoundsToNearestStep) {
  LTISystem system = scalar_system(-1.0, 0.1, {0.1, 0.5, 1.0});
  const std::vector<std::int64_t> steps = ekrmle::observation_steps(system);
  ASSERT_EQ(steps.size(), 3u);
  EXPECT_EQ(steps[0], 1);
  EXPECT_EQ(steps[1], 5);
  EXPECT_EQ(steps[2], 10);
}

TEST(Observe, StacksOutputsInTimeOrder) {
  LTISystem system;
  system.a = Eigen::MatrixXd::Zero(2, 2);
  system.f = Eigen::MatrixXd(1, 2);
  system.f << 1.0, 10.0;
  system.dt = 1.0;
  system.obs_times = {1.0, 2.0, 3.0};
  system.eta_cov = Eigen::MatrixXd::Zero(1, 1);
  Eigen::MatrixXd trajectory(2, 3);
  trajectory << 1.0, 2.0, 3.0, 0.1, 0.2, 0.3;
  const Eigen::VectorXd stacked = ekrmle::observe(system, trajectory);
  ASSERT_EQ(stacked.size(), 3);
  EXPECT_DOUBLE_EQ(stacked(0), 2.0);
  EXPECT_DOUBLE_EQ(stacked(1), 4.0);
  EXPECT_DOUBLE_EQ(stacked(2), 6.0);

  EXPECT_THROW(ekrmle::observe(system, trajectory.leftCols(2)),
               ekrmle::ShapeError);
}

TEST(InducedOperator, MatchesSimulateAndIsLinear) {
  RandomStream stream(90);
  LTISystem system;
  system.a = -test_support::random_spd(stream, 4, 0.5);
  system.f = stream.normal_matrix(2, 4);
  system.dt = 0.01;
  system.obs_times = {0.05, 0.1, 0.2};
  system.eta_cov = Eigen::MatrixXd::Identity(2, 2);
  const ForwardOperator op = ekrmle::forward_operator(system);
  EXPECT_EQ(op.rows(), 6);
  EXPECT_EQ(op.cols(), 4);
  EXPECT_TRUE(op.is_linear());

  const Eigen::VectorXd v1 = stream.normal_vector(4);
  const Eigen::VectorXd v2 = stream.normal_vector(4);
  EXPECT_EQ(op.apply(v1),
            ekrmle::observe(system, ekrmle::simulate(system, v1)));
  const Eigen::VectorXd combined = op.apply(v1 + 2.0 * v2);
  const Eigen::VectorXd superposed = op.apply(v1) + 2.0 * op.apply(v2);
  EXPECT_LE((combined - superposed).norm(),
            1e-12 * std::max(1.0, superposed.norm()));
}

TEST(InducedOperator, DenseMatrixAgreesWithColumnProbing) {
  RandomStream stream(91);
  LTISystem system;
  system.a = -test_support::random_spd(stream, 5, 0.3);
  system.f = stream.normal_matrix(2, 5);
  system.dt = 0.02;
  system.obs_times = {0.1, 0.12, 0.5};
  system.eta_cov = Eigen::MatrixXd::Identity(2, 2);
  const Eigen::MatrixXd probed =
      ekrmle::forward_operator(system).materialize();
  const Eigen::MatrixXd assembled = ekrmle::dense_forward_matrix(system);
  EXPECT_LE(test_support::rel_err(assembled, probed), 1e-10);
}

TEST(InducedOperator, DenseMatrixScalarClosedForm) {
  const LTISystem system = scalar_system(-2.0, 0.25, {0.25, 1.0});
  const Eigen::MatrixXd h = ekrmle::dense_forward_matrix(system);
  ASSERT_EQ(h.rows(), 2);
  ASSERT_EQ(h.cols(), 1);
  EXPECT_DOUBLE_EQ(h(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(h(1, 0), 0.0625);
}

TEST(StackedNoise, BlockDiagonalKroneckerStructure) {
  LTISystem system;
  system.a = Eigen::MatrixXd::Zero(2, 2);
  system.f = Eigen::MatrixXd::Identity(2, 2);
  system.dt = 1.0;
  system.obs_times = {1.0, 2.0};
  system.eta_cov = Eigen::MatrixXd(2, 2);
  system.eta_cov << 2.0, 0.5, 0.5, 1.0;
  const Eigen::MatrixXd cov = ekrmle::stacked_noise_cov(system);
  ASSERT_EQ(cov.rows(), 4);
  EXPECT_EQ(Eigen::MatrixXd(cov.block(0, 0, 2, 2)), system.eta_cov);
  EXPECT_EQ(Eigen::MatrixXd(cov.block(2, 2, 2, 2)), system.eta_cov);
  EXPECT_LE(cov.block(0, 2, 2, 2).norm(), 0.0);
}

TEST(EulerGrowth, SymmetricAndShearCases) {
  LTISystem contracting = scalar_system(-1.0, 0.1, {0.1});
  contracting.a = -Eigen::MatrixXd::Identity(3, 3);
  contracting.f = Eigen::MatrixXd::Identity(3, 3);
  contracting.eta_cov = Eigen::MatrixXd::Zero(3, 3);
  EXPECT_NEAR(ekrmle::euler_growth_factor(contracting), 0.9, 1e-14);

  // Shear block: I + dt A = [[1, b], [0, 1]] has top singular value
  // (b + sqrt(b^2 + 4)) / 2.
  LTISystem shear;
  shear.a = Eigen::MatrixXd::Zero(2, 2);
  shear.a(0, 1) = 1.0;
  shear.f = Eigen::MatrixXd::Identity(2, 2);
  shear.dt = 0.5;
  shear.obs_times = {0.5};
  shear.eta_cov = Eigen::MatrixXd::Zero(2, 2);
  const double b = 0.5;
  EXPECT_NEAR(ekrmle::euler_growth_factor(shear),
              (b + std::sqrt(b * b + 4.0)) / 2.0, 1e-12);
}

TEST(HeatModel, SmallGridMatchesHandLaplacian) {
  const LTISystem system = ekrmle::heat_model(3, 1.0);
  // h = 1/4 so alpha / h^2 = 16.
  Eigen::MatrixXd expected(3, 3);
  expected << -32.0, 16.0, 0.0, 16.0, -32.0, 16.0, 0.0, 16.0, -32.0;
  EXPECT_EQ(system.a, expected);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(system.a);
  EXPECT_LT(eig.eigenvalues().maxCoeff(), 0.0);

  // Sensor at 2/3 of the rod sits nearest interior node index 2.
  ASSERT_EQ(system.f.rows(), 1);
  EXPECT_EQ(system.f(0, 2), 1.0);
  EXPECT_EQ(system.f.cwiseAbs().sum(), 1.0);

  ASSERT_EQ(system.obs_times.size(), 100u);
  EXPECT_NEAR(system.obs_times.front(), 0.1, 1e-12);
  EXPECT_NEAR(system.obs_times.back(), 10.0, 1e-12);
  EXPECT_DOUBLE_EQ(system.eta_cov(0, 0), 0.008 * 0.008);

  EXPECT_THROW(ekrmle::heat_model(2), ekrmle::PreconditionError);
  EXPECT_THROW(ekrmle::heat_model(5, 1.0, 1.5), ekrmle::PreconditionError);
}

TEST(HeatModel, CalibratedDiffusivityHitsTargetDecayRate) {
  for (int d : {5, 20}) {
    const double alpha = ekrmle::heat_alpha_for_decay_rate(d, 0.1);
    const LTISystem system = ekrmle::heat_model(d, alpha);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(system.a);
    EXPECT_NEAR(eig.eigenvalues().maxCoeff(), -0.1, 1e-10 * 0.1);
    // Default alpha = 0 requests exactly this calibration.
    const LTISystem defaulted = ekrmle::heat_model(d);
    EXPECT_EQ(defaulted.a, system.a);
  }
  EXPECT_THROW(ekrmle::heat_alpha_for_decay_rate(10, 0.0),
               ekrmle::PreconditionError);
}

TEST(SynthesizeData, NoiselessSystemReturnsExactObservations) {
  RandomStream stream(92);
  LTISystem system = scalar_system(-2.0, 0.25, {0.25, 1.0});
  const Eigen::VectorXd truth = Eigen::VectorXd::Constant(1, 4.0);
  const Eigen::VectorXd y =
      ekrmle::synthesize_data(system, truth, StreamKey{30, 0});
  EXPECT_DOUBLE_EQ(y(0), 2.0);
  EXPECT_DOUBLE_EQ(y(1), 0.25);
}

TEST(SynthesizeData, DeterministicPerKeyAndNoisy) {
  const LTISystem system = ekrmle::heat_model(4, 1.0, 0.5, 0.001, 0.1, 10);
  Eigen::VectorXd truth(4);
  truth << 1.0, 0.0, -1.0, 0.5;
  const Eigen::VectorXd y1 =
      ekrmle::synthesize_data(system, truth, StreamKey{31, 0});
  const Eigen::VectorXd y2 =
      ekrmle::synthesize_data(system, truth, StreamKey{31, 0});
  const Eigen::VectorXd y3 =
      ekrmle::synthesize_data(system, truth, StreamKey{31, 1});
  EXPECT_EQ(y1, y2);
  EXPECT_NE(y1, y3);
  const Eigen::VectorXd clean =
      ekrmle::observe(system, ekrmle::simulate(system, truth));
  EXPECT_NE(y1, clean);
  EXPECT_LE((y1 - clean).cwiseAbs().maxCoeff(), 6.0 * 0.008);
}

}  // namespace
