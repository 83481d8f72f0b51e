#include "ekrmle/inverse_problem.hpp"

#include <Eigen/SVD>

#include "ekrmle/errors.hpp"
#include "ekrmle/linalg.hpp"

namespace ekrmle {

void validate(const InverseProblem& problem) {
  const Eigen::Index n = problem.op.rows();
  const Eigen::Index d = problem.op.cols();
  if (problem.data.size() != n)
    throw ShapeError("inverse problem: data has dimension " +
                     std::to_string(problem.data.size()) +
                     ", operator range is " + std::to_string(n));
  if (problem.noise_cov.rows() != n || problem.noise_cov.cols() != n)
    throw ShapeError("inverse problem: noise covariance must be " +
                     std::to_string(n) + "x" + std::to_string(n));
  require_symmetric(problem.noise_cov, "noise covariance");
  if (problem.prior) {
    if (problem.prior->mean.size() != d)
      throw ShapeError("inverse problem: prior mean has dimension " +
                       std::to_string(problem.prior->mean.size()) +
                       ", state dimension is " + std::to_string(d));
    if (problem.prior->cov.rows() != d || problem.prior->cov.cols() != d)
      throw ShapeError("inverse problem: prior covariance must be " +
                       std::to_string(d) + "x" + std::to_string(d));
    require_symmetric(problem.prior->cov, "prior covariance");
  }
}

Eigen::VectorXd apply_forward(const InverseProblem& problem,
                              const Eigen::VectorXd& v) {
  return problem.op.apply(v);
}

InverseProblem augment_rls(const InverseProblem& problem,
                           const GaussianPrior& prior,
                           Eigen::Index densify_threshold) {
  validate(problem);
  const Eigen::Index n = problem.obs_dim();
  const Eigen::Index d = problem.state_dim();
  if (prior.mean.size() != d || prior.cov.rows() != d || prior.cov.cols() != d)
    throw ShapeError("augment: prior dimensions do not match state dimension " +
                     std::to_string(d));
  spd_cholesky(prior.cov, "augment: prior covariance");

  InverseProblem out{
      ForwardOperator::stacked(problem.op),
      Eigen::MatrixXd::Zero(n + d, n + d),
      Eigen::VectorXd(n + d),
      std::nullopt,
  };
  if (n + d <= densify_threshold && problem.op.is_linear())
    out.op = ForwardOperator::dense(out.op.materialize());
  out.noise_cov.topLeftCorner(n, n) = problem.noise_cov;
  out.noise_cov.bottomRightCorner(d, d) = prior.cov;
  out.data.head(n) = problem.data;
  out.data.tail(d) = prior.mean;
  return out;
}

InverseProblem augment_rls(const InverseProblem& problem) {
  if (!problem.prior)
    throw PreconditionError("augment: problem carries no prior");
  return augment_rls(problem, *problem.prior);
}

WeightedPseudoinverse::WeightedPseudoinverse(const Eigen::MatrixXd& h,
                                             const Eigen::MatrixXd& gamma,
                                             double rel_cutoff) {
  if (gamma.rows() != h.rows() || gamma.cols() != h.rows())
    throw ShapeError("weighted pseudoinverse: noise covariance must be " +
                     std::to_string(h.rows()) + "x" + std::to_string(h.rows()));
  const auto llt = spd_cholesky(gamma, "weighted pseudoinverse: noise covariance");

  // Whiten: W = L^-1 H, so |y - Hv|_{Gamma^-1} = |L^-1 y - W v|_2.
  Eigen::MatrixXd w = llt.matrixL().solve(h);
  normal_ = Eigen::MatrixXd(h.cols(), h.cols());
  normal_.setZero();
  normal_.selfadjointView<Eigen::Lower>().rankUpdate(w.transpose());
  normal_ = normal_.selfadjointView<Eigen::Lower>();

  Eigen::BDCSVD<Eigen::MatrixXd> svd(w,
                                     Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::VectorXd& sv = svd.singularValues();
  const double cutoff = sv.size() ? rel_cutoff * sv(0) : 0.0;
  rank_ = 0;
  while (rank_ < sv.size() && sv(rank_) > cutoff && sv(rank_) > 0.0) ++rank_;

  right_ = svd.matrixV().leftCols(rank_);
  inv_singular_ = sv.head(rank_).cwiseInverse();
  // L^-T U_r so that solve() is right_ * diag(1/sigma) * (L^-T U_r)^T y.
  lifted_left_ = llt.matrixL().transpose().solve(
      Eigen::MatrixXd(svd.matrixU().leftCols(rank_)));
}

Eigen::VectorXd WeightedPseudoinverse::solve(const Eigen::VectorXd& y) const {
  if (y.size() != lifted_left_.rows())
    throw ShapeError("weighted pseudoinverse: data has dimension " +
                     std::to_string(y.size()) + ", expected " +
                     std::to_string(lifted_left_.rows()));
  return right_ *
         (inv_singular_.asDiagonal() * (lifted_left_.transpose() * y));
}

Eigen::MatrixXd WeightedPseudoinverse::solve_batch(
    const Eigen::MatrixXd& ys) const {
  if (ys.rows() != lifted_left_.rows())
    throw ShapeError("weighted pseudoinverse: data has dimension " +
                     std::to_string(ys.rows()) + ", expected " +
                     std::to_string(lifted_left_.rows()));
  return right_ *
         (inv_singular_.asDiagonal() * (lifted_left_.transpose() * ys));
}

Eigen::MatrixXd WeightedPseudoinverse::normal_pseudoinverse() const {
  return right_ * inv_singular_.cwiseAbs2().asDiagonal() * right_.transpose();
}

Eigen::VectorXd minimum_norm_solution(const Eigen::MatrixXd& h,
                                      const Eigen::MatrixXd& gamma,
                                      const Eigen::VectorXd& y) {
  return WeightedPseudoinverse(h, gamma).solve(y);
}

Eigen::VectorXd minimum_norm_solution(const ForwardOperator& op,
                                      const Eigen::MatrixXd& gamma,
                                      const Eigen::VectorXd& y) {
  if (!op.is_linear())
    throw UnsupportedOperatorError(
        "minimum-norm solution requires a linear operator");
  return minimum_norm_solution(op.materialize(), gamma, y);
}

GaussianPosterior exact_posterior(const InverseProblem& problem) {
  validate(problem);
  if (!problem.prior)
    throw PreconditionError("exact posterior: problem carries no prior");
  if (!problem.op.is_linear())
    throw UnsupportedOperatorError(
        "exact posterior: closed form requires a linear operator");

  const Eigen::MatrixXd h = problem.op.materialize();
  const Eigen::Index d = problem.state_dim();
  const auto llt_noise = spd_cholesky(problem.noise_cov,
                                      "exact posterior: noise covariance");
  const auto llt_prior =
      spd_cholesky(problem.prior->cov, "exact posterior: prior covariance");

  const Eigen::MatrixXd w = llt_noise.matrixL().solve(h);
  const Eigen::VectorXd b = llt_noise.matrixL().solve(problem.data);

  Eigen::MatrixXd precision =
      llt_prior.solve(Eigen::MatrixXd::Identity(d, d));
  precision.selfadjointView<Eigen::Lower>().rankUpdate(w.transpose());
  precision = Eigen::MatrixXd(precision.selfadjointView<Eigen::Lower>());

  Eigen::LLT<Eigen::MatrixXd> llt_pos(precision);
  if (llt_pos.info() != Eigen::Success)
    throw NumericalError("exact posterior: posterior precision is not SPD");

  const Eigen::VectorXd rhs =
      w.transpose() * b + llt_prior.solve(problem.prior->mean);
  GaussianPosterior post;
  post.mean = llt_pos.solve(rhs);
  post.cov = llt_pos.solve(Eigen::MatrixXd::Identity(d, d));
  post.cov = 0.5 * (post.cov + post.cov.transpose()).eval();
  return post;
}

}  // namespace ekrmle
