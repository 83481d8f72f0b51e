#include "ekrmle/balanced_truncation.hpp"

#include <cmath>
#include <filesystem>
#include <numeric>
#include <vector>

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include "ekrmle/csv.hpp"
#include "ekrmle/errors.hpp"
#include "ekrmle/linalg.hpp"
#include "ekrmle/matrix_market.hpp"

namespace ekrmle {
namespace {

bool nearly_symmetric(const Eigen::MatrixXd& m) {
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  return (m - m.transpose()).cwiseAbs().maxCoeff() <= 1e-12 * scale;
}

// Quasi-upper-triangular block partition of a real Schur factor.
struct SchurBlocks {
  std::vector<Eigen::Index> starts;
  std::vector<Eigen::Index> sizes;
};

SchurBlocks partition_blocks(const Eigen::MatrixXd& t) {
  SchurBlocks blocks;
  const Eigen::Index d = t.rows();
  for (Eigen::Index i = 0; i < d;) {
    const Eigen::Index size = (i + 1 < d && t(i + 1, i) != 0.0) ? 2 : 1;
    blocks.starts.push_back(i);
    blocks.sizes.push_back(size);
    i += size;
  }
  return blocks;
}

void require_stable_schur(const Eigen::MatrixXd& t, const SchurBlocks& blocks) {
  for (std::size_t b = 0; b < blocks.starts.size(); ++b) {
    const Eigen::Index i = blocks.starts[b];
    const double real_part = blocks.sizes[b] == 1
                                 ? t(i, i)
                                 : 0.5 * (t(i, i) + t(i + 1, i + 1));
    if (!(real_part < 0.0))
      throw PreconditionError(
          "lyapunov solve: state matrix must be stable (eigenvalue real "
          "parts negative)");
  }
}

// Solves T^T Y + Y T = W for quasi-upper-triangular T, by forward
// substitution over the diagonal blocks (the classical Schur-form
// Sylvester recursion).
Eigen::MatrixXd solve_schur_sylvester(const Eigen::MatrixXd& t,
                                      const Eigen::MatrixXd& w) {
  const Eigen::Index d = t.rows();
  const SchurBlocks blocks = partition_blocks(t);
  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(d, d);

  for (std::size_t bj = 0; bj < blocks.starts.size(); ++bj) {
    const Eigen::Index j0 = blocks.starts[bj];
    const Eigen::Index wj = blocks.sizes[bj];
    Eigen::MatrixXd rhs = w.middleCols(j0, wj);
    if (j0 > 0) rhs.noalias() -= y.leftCols(j0) * t.block(0, j0, j0, wj);

    for (std::size_t bi = 0; bi < blocks.starts.size(); ++bi) {
      const Eigen::Index i0 = blocks.starts[bi];
      const Eigen::Index hi = blocks.sizes[bi];
      Eigen::MatrixXd r = rhs.middleRows(i0, hi);
      if (i0 > 0)
        r.noalias() -=
            t.block(0, i0, i0, hi).transpose() * y.block(0, j0, i0, wj);

      // Small Sylvester A Z + Z B = r with A = T_ii^T, B = T_jj, solved
      // through the Kronecker form (I (x) A + B^T (x) I) vec(Z) = vec(r).
      const Eigen::MatrixXd a_small = t.block(i0, i0, hi, hi).transpose();
      const Eigen::MatrixXd b_small = t.block(j0, j0, wj, wj);
      Eigen::MatrixXd k = Eigen::MatrixXd::Zero(hi * wj, hi * wj);
      for (Eigen::Index c = 0; c < wj; ++c) {
        k.block(c * hi, c * hi, hi, hi) += a_small;
        for (Eigen::Index c2 = 0; c2 < wj; ++c2)
          k.block(c * hi, c2 * hi, hi, hi).diagonal().array() +=
              b_small(c2, c);
      }
      const Eigen::Map<const Eigen::VectorXd> r_vec(r.data(), r.size());
      const Eigen::VectorXd z_vec = k.fullPivLu().solve(r_vec);
      y.block(i0, j0, hi, wj) =
          Eigen::Map<const Eigen::MatrixXd>(z_vec.data(), hi, wj);
    }
  }
  return y;
}

// Pivoted semidefinite Cholesky: returns L with Q ~= L L^T, stopping when
// the largest remaining diagonal falls below 1e-12 trace(Q)/d.
Eigen::MatrixXd semidefinite_factor(const Eigen::MatrixXd& q) {
  const Eigen::Index d = q.rows();
  Eigen::MatrixXd work = q;
  Eigen::MatrixXd l = Eigen::MatrixXd::Zero(d, d);
  std::vector<Eigen::Index> perm(d);
  std::iota(perm.begin(), perm.end(), 0);
  const double tol =
      std::max(0.0, kBalanceRankTol * q.trace() / static_cast<double>(d));

  Eigen::Index rank = 0;
  for (Eigen::Index k = 0; k < d; ++k) {
    Eigen::Index pivot = k;
    for (Eigen::Index i = k + 1; i < d; ++i)
      if (work(i, i) > work(pivot, pivot)) pivot = i;
    if (!(work(pivot, pivot) > tol)) break;
    if (pivot != k) {
      work.row(k).swap(work.row(pivot));
      work.col(k).swap(work.col(pivot));
      l.row(k).head(k).swap(l.row(pivot).head(k));
      std::swap(perm[k], perm[pivot]);
    }
    const double root = std::sqrt(work(k, k));
    l(k, k) = root;
    const Eigen::Index tail = d - k - 1;
    if (tail > 0) {
      l.col(k).tail(tail) = work.col(k).tail(tail) / root;
      work.bottomRightCorner(tail, tail).noalias() -=
          l.col(k).tail(tail) * l.col(k).tail(tail).transpose();
    }
    ++rank;
  }

  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(d, rank);
  for (Eigen::Index i = 0; i < d; ++i) out.row(perm[i]) = l.row(i).head(rank);
  return out;
}

}  // namespace

Eigen::MatrixXd solve_lyapunov(const Eigen::MatrixXd& a,
                               const Eigen::MatrixXd& c) {
  const Eigen::Index d = a.rows();
  if (a.cols() != d)
    throw ShapeError("lyapunov solve: state matrix must be square");
  if (c.rows() != d || c.cols() != d)
    throw ShapeError("lyapunov solve: right-hand side must be " +
                     std::to_string(d) + "x" + std::to_string(d));
  require_symmetric(c, "lyapunov solve: right-hand side");

  Eigen::MatrixXd x;
  if (nearly_symmetric(a)) {
    const Eigen::MatrixXd a_sym = 0.5 * (a + a.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(a_sym);
    if (eig.info() != Eigen::Success)
      throw NumericalError("lyapunov solve: eigendecomposition failed");
    const Eigen::VectorXd& lambda = eig.eigenvalues();
    if (!(lambda.maxCoeff() < 0.0))
      throw PreconditionError(
          "lyapunov solve: state matrix must be stable (eigenvalue real "
          "parts negative)");
    Eigen::MatrixXd core =
        eig.eigenvectors().transpose() * c * eig.eigenvectors();
    for (Eigen::Index i = 0; i < d; ++i)
      for (Eigen::Index j = 0; j < d; ++j)
        core(i, j) /= -lambda(i) - lambda(j);
    x = eig.eigenvectors() * core * eig.eigenvectors().transpose();
  } else {
    Eigen::RealSchur<Eigen::MatrixXd> schur(a);
    if (schur.info() != Eigen::Success)
      throw NumericalError("lyapunov solve: Schur decomposition failed");
    const Eigen::MatrixXd& t = schur.matrixT();
    const Eigen::MatrixXd& basis = schur.matrixU();
    require_stable_schur(t, partition_blocks(t));
    const Eigen::MatrixXd w = -basis.transpose() * c * basis;
    x = basis * solve_schur_sylvester(t, w) * basis.transpose();
  }
  x = 0.5 * (x + x.transpose()).eval();

  const double residual = spectral_norm(a.transpose() * x + x * a + c);
  const double tol = 1e-8 * spectral_norm(c);
  if (residual > tol)
    throw NumericalError(
        "lyapunov solve: residual " + std::to_string(residual) +
        " exceeds tolerance " + std::to_string(tol));
  return x;
}

Eigen::MatrixXd observability_gramian(const LTISystem& system) {
  validate(system);
  if (system.f.isZero(0.0))
    return Eigen::MatrixXd::Zero(system.state_dim(), system.state_dim());
  const auto llt =
      spd_cholesky(system.eta_cov, "observability gramian: noise covariance");
  const Eigen::MatrixXd whitened = llt.matrixL().solve(system.f);
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(system.state_dim(),
                                            system.state_dim());
  c.selfadjointView<Eigen::Lower>().rankUpdate(whitened.transpose());
  c = c.selfadjointView<Eigen::Lower>();
  return solve_lyapunov(system.a, c);
}

Eigen::MatrixXd prior_from_lyapunov(const Eigen::MatrixXd& a) {
  return solve_lyapunov(
      a.transpose(), Eigen::MatrixXd::Identity(a.rows(), a.rows()));
}

BalancingFactors balance(const Eigen::MatrixXd& q,
                         const Eigen::MatrixXd& gamma_pr) {
  if (q.rows() != gamma_pr.rows() || q.cols() != gamma_pr.cols())
    throw ShapeError("balance: Gramian and prior dimensions differ");
  require_symmetric(q, "balance: observability Gramian");
  const auto llt = spd_cholesky(gamma_pr, "balance: prior covariance");

  BalancingFactors factors;
  factors.r = llt.matrixL();
  factors.l = semidefinite_factor(q);
  if (factors.l.cols() == 0) {
    factors.phi = Eigen::MatrixXd(0, 0);
    factors.xi = Eigen::VectorXd(0);
    factors.psi = Eigen::MatrixXd(q.rows(), 0);
    return factors;
  }
  Eigen::BDCSVD<Eigen::MatrixXd> svd(factors.l.transpose() * factors.r,
                                     Eigen::ComputeThinU | Eigen::ComputeThinV);
  factors.phi = svd.matrixU();
  factors.xi = svd.singularValues();
  factors.psi = svd.matrixV();
  return factors;
}

Eigen::Index usable_order(const BalancingFactors& factors) {
  if (factors.xi.size() == 0 || !(factors.xi(0) > 0.0)) return 0;
  Eigen::Index rank = 0;
  while (rank < factors.xi.size() &&
         factors.xi(rank) > kBalanceRankTol * factors.xi(0))
    ++rank;
  return rank;
}

ReducedModel reduce(const LTISystem& system, const BalancingFactors& factors,
                    Eigen::Index rho) {
  validate(system);
  const Eigen::Index usable = usable_order(factors);
  if (rho < 1 || rho > usable)
    throw RankError("reduce: requested order " + std::to_string(rho) +
                        " exceeds the usable rank " + std::to_string(usable),
                    rho, usable);

  ReducedModel model;
  model.order = rho;
  model.xi = factors.xi.head(rho);
  const Eigen::VectorXd scale = model.xi.cwiseSqrt().cwiseInverse();
  // Column-by-column so that the basis for a smaller order is bitwise a
  // prefix of the basis for a larger one (blocked products would reassociate
  // the sums and break that).
  model.v.resize(factors.l.rows(), rho);
  model.u.resize(factors.r.rows(), rho);
  for (Eigen::Index k = 0; k < rho; ++k) {
    model.v.col(k) = scale(k) * (factors.l * factors.phi.col(k));
    model.u.col(k) = scale(k) * (factors.r * factors.psi.col(k));
  }
  model.a_hat = model.v.transpose() * system.a * model.u;
  model.f_hat = system.f * model.u;

  model.reduced.a = model.a_hat;
  model.reduced.f = model.f_hat;
  model.reduced.dt = system.dt;
  model.reduced.obs_times = system.obs_times;
  model.reduced.eta_cov = system.eta_cov;
  model.parent = std::make_shared<const LTISystem>(system);

  // The reduced dynamics are not guaranteed to stay Euler-stable at the
  // parent timestep; refuse to build a model the simulator would blow up.
  Eigen::EigenSolver<Eigen::MatrixXd> eig(model.a_hat);
  if (eig.info() != Eigen::Success)
    throw NumericalError("reduce: eigensolve of the reduced matrix failed");
  double growth = 0.0;
  double suggested = system.dt;
  bool stabilizable = true;
  for (Eigen::Index i = 0; i < rho; ++i) {
    const std::complex<double> lambda = eig.eigenvalues()(i);
    growth = std::max(growth, std::abs(1.0 + system.dt * lambda));
    if (lambda.real() < 0.0)
      suggested = std::min(
          suggested, -2.0 * lambda.real() / std::norm(lambda));
    else
      stabilizable = false;
  }
  if (growth > 1.0 + 1e-12)
    throw InstabilityError(
        "reduce: order-" + std::to_string(rho) +
            " model is unstable under forward Euler at dt = " +
            std::to_string(system.dt),
        0, stabilizable ? 0.9 * suggested : 0.0);
  return model;
}

ReducedModel reduce(const LTISystem& system, const Eigen::MatrixXd& gamma_pr,
                    Eigen::Index rho) {
  return reduce(system, balance(observability_gramian(system), gamma_pr), rho);
}

ForwardOperator reduced_forward_operator(const ReducedModel& model) {
  auto shared = std::make_shared<const ReducedModel>(model);
  const Eigen::Index full_dim = model.v.rows();
  return ForwardOperator::lti_induced(
      model.reduced.obs_dim(), full_dim, [shared](const Eigen::VectorXd& v) {
        return observe(shared->reduced,
                       simulate(shared->reduced, shared->v.transpose() * v));
      });
}

Eigen::MatrixXd reduced_forward_matrix(const ReducedModel& model) {
  const Eigen::Index rho = model.order;
  Eigen::MatrixXd core(model.reduced.obs_dim(), rho);
  for (Eigen::Index j = 0; j < rho; ++j) {
    const Eigen::VectorXd probe = Eigen::VectorXd::Unit(rho, j);
    core.col(j) = observe(model.reduced, simulate(model.reduced, probe));
  }
  return core * model.v.transpose();
}

GaussianPosterior reduced_posterior(const ReducedModel& model,
                                    const Eigen::MatrixXd& gamma_pr,
                                    const Eigen::MatrixXd& gamma,
                                    const Eigen::VectorXd& y) {
  InverseProblem problem{
      ForwardOperator::dense(reduced_forward_matrix(model)),
      gamma,
      y,
      GaussianPrior{Eigen::VectorXd::Zero(model.v.rows()), gamma_pr},
  };
  return exact_posterior(problem);
}

void export_reduced_model(const ReducedModel& model,
                          const std::string& directory) {
  const std::filesystem::path dir(directory);
  write_matrix_market((dir / "Ahat.mtx").string(), model.a_hat);
  write_matrix_market((dir / "Fhat.mtx").string(), model.f_hat);
  write_matrix_market((dir / "Vrho.mtx").string(), model.v);
  write_matrix_market((dir / "Urho.mtx").string(), model.u);
  CsvWriter writer((dir / "xi.csv").string(), {"index", "singular_value"});
  for (Eigen::Index i = 0; i < model.xi.size(); ++i) {
    writer.cell(static_cast<std::int64_t>(i + 1));
    writer.cell(model.xi(i));
    writer.end_row();
  }
  writer.close();
}

}  // namespace ekrmle
