#pragma once

#include <vector>

#include <Eigen/Dense>

#include "ekrmle/forward_operator.hpp"
#include "ekrmle/rng.hpp"

namespace ekrmle {

// Linear time-invariant dynamics dx/dt = A x observed through y_k = F x(t_k)
// plus measurement noise. The simulator is forward Euler with step `dt`; the
// induced inverse-problem operator stacks the m outputs into one vector of
// length m * d_out.
struct LTISystem {
  Eigen::MatrixXd a;             // d x d
  Eigen::MatrixXd f;             // d_out x d
  double dt = 1e-3;
  std::vector<double> obs_times; // strictly increasing, > 0
  Eigen::MatrixXd eta_cov;       // d_out x d_out, symmetric PSD

  Eigen::Index state_dim() const { return a.rows(); }
  Eigen::Index output_dim() const { return f.rows(); }
  Eigen::Index obs_dim() const {
    return static_cast<Eigen::Index>(obs_times.size()) * f.rows();
  }
};

// Checks shapes, time ordering, and that every observation time is an
// integer multiple of dt (within 1e-9 relative; silent interpolation would
// change the forward map).
void validate(const LTISystem& system);

// Euler step index of each observation time.
std::vector<std::int64_t> observation_steps(const LTISystem& system);

// Forward-Euler trajectory from x(0) = x0; column k holds the state at
// obs_times[k]. Non-finite states raise InstabilityError naming the step.
Eigen::MatrixXd simulate(const LTISystem& system, const Eigen::VectorXd& x0);

// Stacks F x(t_k) over the observation times, in time order.
Eigen::VectorXd observe(const LTISystem& system,
                        const Eigen::MatrixXd& trajectory);

// The induced linear map v -> observe(simulate(v)) as a ForwardOperator.
ForwardOperator forward_operator(const LTISystem& system);

// Dense matrix of the induced map, assembled by propagating the identity
// with memoized powers of (I + dt A) between observation times — far cheaper
// than column probing when the step count dwarfs the state dimension.
// Agrees with forward_operator up to roundoff in the product order.
Eigen::MatrixXd dense_forward_matrix(const LTISystem& system);

// Block-diagonal noise covariance of the stacked observation vector,
// I_m (Kronecker) eta_cov.
Eigen::MatrixXd stacked_noise_cov(const LTISystem& system);

// Growth factor |I + dt A| (spectral norm; extreme eigenvalues when A is
// symmetric). Values above 1 + 1e-12 indicate an unstable explicit scheme.
double euler_growth_factor(const LTISystem& system);

// Diffusivity that makes the slowest mode of the Dirichlet heat rod decay
// at `target_rate` (the slowest eigenvalue of alpha/h^2 tridiag(1,-2,1) is
// -alpha (4/h^2) sin^2(pi h / 2) with h = 1/(d+1)).
double heat_alpha_for_decay_rate(int d, double target_rate);

// Heat rod with homogeneous Dirichlet boundaries on a d-point interior
// grid: A = alpha/h^2 tridiag(1,-2,1), single output reading the node
// nearest sensor_frac of the rod length, equally spaced observation times
// t_final/num_obs .. t_final. alpha = 0 requests calibration so the slowest
// mode decays at rate 0.1.
LTISystem heat_model(int d, double alpha = 0.0, double sensor_frac = 2.0 / 3.0,
                     double dt = 1e-3, double t_final = 10.0, int num_obs = 100,
                     double sigma_obs = 0.008);

// y = forward(v_true) + stacked noise draws, one eta_k ~ N(0, eta_cov) per
// observation time, from the data-synthesis substream of `key`.
Eigen::VectorXd synthesize_data(const LTISystem& system,
                                const Eigen::VectorXd& v_true,
                                const StreamKey& key);

}  // namespace ekrmle
