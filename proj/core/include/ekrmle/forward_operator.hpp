#pragma once

#include <Eigen/Core>
#include <functional>
#include <memory>
#include <string>

namespace ekrmle {

enum class OperatorKind { DenseMatrix, LtiInduced, BlackBox };

std::string to_string(OperatorKind kind);

/// Forward map v -> H(v) from state space R^d to observation space R^n.
///
/// Three creation paths: an explicit dense matrix, a map induced by
/// simulating linear dynamics, and an arbitrary callable. Structural block
/// compositions (see stacked()) report kind black-box but keep linearity, so
/// capability checks go through is_linear()/has_dense() rather than kind().
///
/// apply_batch is defined as apply per column and is implemented that way:
/// column j of apply_batch(V) equals apply(V.col(j)) bit for bit.
class ForwardOperator {
 public:
  using ApplyFn = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

  static ForwardOperator dense(Eigen::MatrixXd matrix);
  static ForwardOperator lti_induced(Eigen::Index rows, Eigen::Index cols,
                                     ApplyFn apply);
  static ForwardOperator black_box(Eigen::Index rows, Eigen::Index cols,
                                   ApplyFn apply, bool linear = false);
  /// The block map v -> [top(v); v] used by regularized least squares.
  static ForwardOperator stacked(ForwardOperator top);

  Eigen::Index rows() const { return rows_; }
  Eigen::Index cols() const { return cols_; }
  OperatorKind kind() const { return kind_; }
  bool is_linear() const { return linear_; }
  bool has_dense() const { return static_cast<bool>(dense_); }

  /// The stored matrix of a dense operator; throws for other kinds.
  const Eigen::MatrixXd& dense_matrix() const;

  Eigen::VectorXd apply(const Eigen::VectorXd& v) const;
  Eigen::MatrixXd apply_batch(const Eigen::MatrixXd& columns) const;

  /// Dense n x d matrix of a linear operator; dense operators return a copy,
  /// everything else is materialized by applying to unit vectors. Throws
  /// UnsupportedOperatorError for nonlinear maps.
  Eigen::MatrixXd materialize() const;

 private:
  ForwardOperator(OperatorKind kind, Eigen::Index rows, Eigen::Index cols,
                  bool linear)
      : kind_(kind), rows_(rows), cols_(cols), linear_(linear) {}

  void check_input(Eigen::Index got_rows) const;

  OperatorKind kind_;
  Eigen::Index rows_;
  Eigen::Index cols_;
  bool linear_;
  std::shared_ptr<const Eigen::MatrixXd> dense_;
  std::shared_ptr<const ForwardOperator> stacked_top_;
  ApplyFn fn_;
};

}  // namespace ekrmle
