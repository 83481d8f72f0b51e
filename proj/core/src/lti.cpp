#include "ekrmle/lti.hpp"

#include <cmath>
#include <map>
#include <memory>

#include <Eigen/Eigenvalues>

#include "ekrmle/errors.hpp"
#include "ekrmle/linalg.hpp"

namespace ekrmle {
namespace {

constexpr double kTimeAlignmentTol = 1e-9;
constexpr double kPi = 3.14159265358979323846;

}  // namespace

void validate(const LTISystem& system) {
  const Eigen::Index d = system.a.rows();
  if (system.a.cols() != d || d == 0)
    throw ShapeError("lti system: state matrix must be square and non-empty");
  if (system.f.cols() != d || system.f.rows() == 0)
    throw ShapeError("lti system: output matrix must be d_out x " +
                     std::to_string(d) + " with d_out >= 1");
  if (!(system.dt > 0.0))
    throw PreconditionError("lti system: timestep must be positive");
  if (system.obs_times.empty())
    throw PreconditionError("lti system: at least one observation time");
  double previous = 0.0;
  for (double t : system.obs_times) {
    if (!(t > previous))
      throw PreconditionError(
          "lti system: observation times must be strictly increasing and "
          "positive");
    const double steps = t / system.dt;
    const double rounded = std::round(steps);
    if (std::abs(t - rounded * system.dt) >
        kTimeAlignmentTol * std::max(std::abs(t), system.dt))
      throw PreconditionError(
          "lti system: observation time " + std::to_string(t) +
          " is not an integer multiple of dt = " + std::to_string(system.dt));
    previous = t;
  }
  if (system.eta_cov.rows() != system.f.rows() ||
      system.eta_cov.cols() != system.f.rows())
    throw ShapeError("lti system: noise covariance must be " +
                     std::to_string(system.f.rows()) + "x" +
                     std::to_string(system.f.rows()));
  require_symmetric(system.eta_cov, "lti system: noise covariance");
}

std::vector<std::int64_t> observation_steps(const LTISystem& system) {
  validate(system);
  std::vector<std::int64_t> steps;
  steps.reserve(system.obs_times.size());
  for (double t : system.obs_times)
    steps.push_back(static_cast<std::int64_t>(std::llround(t / system.dt)));
  return steps;
}

Eigen::MatrixXd simulate(const LTISystem& system, const Eigen::VectorXd& x0) {
  const std::vector<std::int64_t> steps = observation_steps(system);
  const Eigen::Index d = system.state_dim();
  if (x0.size() != d)
    throw ShapeError("simulate: initial state has dimension " +
                     std::to_string(x0.size()) + ", expected " +
                     std::to_string(d));

  Eigen::MatrixXd trajectory(d, static_cast<Eigen::Index>(steps.size()));
  Eigen::VectorXd x = x0;
  Eigen::VectorXd slope(d);
  std::size_t next_record = 0;
  if (steps[0] == 0) {
    trajectory.col(0) = x;
    ++next_record;
  }
  const std::int64_t last_step = steps.back();
  for (std::int64_t step = 1; step <= last_step; ++step) {
    slope.noalias() = system.a * x;
    x += system.dt * slope;
    if (!x.allFinite()) {
      // For a stable symmetric A the explicit scheme needs dt < 2/|lambda|_max.
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(
          0.5 * (system.a + system.a.transpose()));
      const double radius = eig.eigenvalues().cwiseAbs().maxCoeff();
      throw InstabilityError("simulate: state became non-finite at step " +
                                 std::to_string(step),
                             step, radius > 0.0 ? 1.0 / radius : 0.0);
    }
    while (next_record < steps.size() && steps[next_record] == step) {
      trajectory.col(static_cast<Eigen::Index>(next_record)) = x;
      ++next_record;
    }
  }
  return trajectory;
}

Eigen::VectorXd observe(const LTISystem& system,
                        const Eigen::MatrixXd& trajectory) {
  const Eigen::Index m = static_cast<Eigen::Index>(system.obs_times.size());
  const Eigen::Index d_out = system.output_dim();
  if (trajectory.rows() != system.state_dim() || trajectory.cols() != m)
    throw ShapeError("observe: trajectory must be " +
                     std::to_string(system.state_dim()) + "x" +
                     std::to_string(m));
  Eigen::VectorXd stacked(m * d_out);
  for (Eigen::Index k = 0; k < m; ++k)
    stacked.segment(k * d_out, d_out).noalias() = system.f * trajectory.col(k);
  return stacked;
}

ForwardOperator forward_operator(const LTISystem& system) {
  validate(system);
  auto shared = std::make_shared<const LTISystem>(system);
  return ForwardOperator::lti_induced(
      shared->obs_dim(), shared->state_dim(),
      [shared](const Eigen::VectorXd& v) {
        return observe(*shared, simulate(*shared, v));
      });
}

Eigen::MatrixXd dense_forward_matrix(const LTISystem& system) {
  validate(system);
  const std::vector<std::int64_t> steps = observation_steps(system);
  const Eigen::Index d = system.state_dim();
  const Eigen::Index d_out = system.output_dim();
  const Eigen::MatrixXd stepper =
      Eigen::MatrixXd::Identity(d, d) + system.dt * system.a;

  // stepper^g by square-and-multiply, memoized per distinct gap length.
  std::map<std::int64_t, Eigen::MatrixXd> powers;
  const auto power = [&](std::int64_t g) -> const Eigen::MatrixXd& {
    const auto it = powers.find(g);
    if (it != powers.end()) return it->second;
    Eigen::MatrixXd result = Eigen::MatrixXd::Identity(d, d);
    Eigen::MatrixXd base = stepper;
    for (std::int64_t e = g; e > 0; e >>= 1) {
      if (e & 1) result = (result * base).eval();
      if (e > 1) base = (base * base).eval();
    }
    return powers.emplace(g, std::move(result)).first->second;
  };

  const Eigen::Index m = static_cast<Eigen::Index>(steps.size());
  Eigen::MatrixXd h(m * d_out, d);
  Eigen::MatrixXd x = Eigen::MatrixXd::Identity(d, d);
  std::int64_t previous = 0;
  for (Eigen::Index k = 0; k < m; ++k) {
    const std::int64_t gap = steps[static_cast<std::size_t>(k)] - previous;
    previous = steps[static_cast<std::size_t>(k)];
    if (gap > 0) x = (power(gap) * x).eval();
    if (!x.allFinite())
      throw InstabilityError(
          "dense forward assembly produced non-finite values; the explicit "
          "Euler step is unstable for this system",
          previous);
    h.middleRows(k * d_out, d_out).noalias() = system.f * x;
  }
  return h;
}

Eigen::MatrixXd stacked_noise_cov(const LTISystem& system) {
  const Eigen::Index m = static_cast<Eigen::Index>(system.obs_times.size());
  const Eigen::Index d_out = system.output_dim();
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(m * d_out, m * d_out);
  for (Eigen::Index k = 0; k < m; ++k)
    cov.block(k * d_out, k * d_out, d_out, d_out) = system.eta_cov;
  return cov;
}

double euler_growth_factor(const LTISystem& system) {
  const Eigen::Index d = system.state_dim();
  const Eigen::MatrixXd stepper =
      Eigen::MatrixXd::Identity(d, d) + system.dt * system.a;
  const double skew = (system.a - system.a.transpose()).cwiseAbs().maxCoeff();
  const double scale = std::max(1.0, system.a.cwiseAbs().maxCoeff());
  if (skew <= 1e-12 * scale) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(stepper,
                                                       Eigen::EigenvaluesOnly);
    return eig.eigenvalues().cwiseAbs().maxCoeff();
  }
  return spectral_norm(stepper);
}

double heat_alpha_for_decay_rate(int d, double target_rate) {
  if (d < 3) throw PreconditionError("heat model requires d >= 3");
  if (!(target_rate > 0.0))
    throw PreconditionError("heat model: decay rate must be positive");
  const double h = 1.0 / (d + 1);
  const double s = std::sin(kPi * h / 2.0);
  return target_rate * h * h / (4.0 * s * s);
}

LTISystem heat_model(int d, double alpha, double sensor_frac, double dt,
                     double t_final, int num_obs, double sigma_obs) {
  if (d < 3) throw PreconditionError("heat model requires d >= 3");
  if (!(sensor_frac > 0.0 && sensor_frac < 1.0))
    throw PreconditionError("heat model: sensor position must be in (0,1)");
  if (num_obs < 1)
    throw PreconditionError("heat model: at least one observation");
  if (alpha == 0.0) alpha = heat_alpha_for_decay_rate(d, 0.1);

  const double h = 1.0 / (d + 1);
  const double scale = alpha / (h * h);
  LTISystem system;
  system.a = Eigen::MatrixXd::Zero(d, d);
  for (int i = 0; i < d; ++i) {
    system.a(i, i) = -2.0 * scale;
    if (i > 0) system.a(i, i - 1) = scale;
    if (i + 1 < d) system.a(i, i + 1) = scale;
  }

  // Interior node i sits at (i+1) h; pick the one nearest the sensor.
  int sensor = static_cast<int>(std::lround(sensor_frac / h)) - 1;
  sensor = std::max(0, std::min(d - 1, sensor));
  system.f = Eigen::MatrixXd::Zero(1, d);
  system.f(0, sensor) = 1.0;

  system.dt = dt;
  const double spacing = t_final / num_obs;
  system.obs_times.reserve(num_obs);
  for (int k = 1; k <= num_obs; ++k) system.obs_times.push_back(k * spacing);
  system.eta_cov = Eigen::MatrixXd::Constant(1, 1, sigma_obs * sigma_obs);
  validate(system);
  return system;
}

Eigen::VectorXd synthesize_data(const LTISystem& system,
                                const Eigen::VectorXd& v_true,
                                const StreamKey& key) {
  validate(system);
  Eigen::VectorXd y = observe(system, simulate(system, v_true));
  if (system.eta_cov.isZero(0.0)) return y;
  const Eigen::MatrixXd factor =
      psd_sqrt(system.eta_cov, "lti system: noise covariance");
  const Eigen::Index d_out = system.output_dim();
  RandomStream stream = key.stream(stream_tag::kDataSynthesis);
  for (Eigen::Index k = 0;
       k < static_cast<Eigen::Index>(system.obs_times.size()); ++k)
    y.segment(k * d_out, d_out) += factor * stream.normal_vector(d_out);
  return y;
}

}  // namespace ekrmle
