#include "ekrmle/forward_operator.hpp"

#include "ekrmle/errors.hpp"

namespace ekrmle {

std::string to_string(OperatorKind kind) {
  switch (kind) {
    case OperatorKind::DenseMatrix: return "dense-matrix";
    case OperatorKind::LtiInduced: return "lti-induced";
    case OperatorKind::BlackBox: return "black-box";
  }
  return "unknown";
}

ForwardOperator ForwardOperator::dense(Eigen::MatrixXd matrix) {
  if (matrix.rows() == 0 || matrix.cols() == 0)
    throw ShapeError("forward operator: dense matrix must be nonempty");
  ForwardOperator op(OperatorKind::DenseMatrix, matrix.rows(), matrix.cols(),
                     true);
  op.dense_ = std::make_shared<const Eigen::MatrixXd>(std::move(matrix));
  return op;
}

ForwardOperator ForwardOperator::lti_induced(Eigen::Index rows,
                                             Eigen::Index cols,
                                             ApplyFn apply) {
  if (rows <= 0 || cols <= 0)
    throw ShapeError("forward operator: dimensions must be positive");
  if (!apply)
    throw PreconditionError("forward operator: missing apply callable");
  ForwardOperator op(OperatorKind::LtiInduced, rows, cols, true);
  op.fn_ = std::move(apply);
  return op;
}

ForwardOperator ForwardOperator::black_box(Eigen::Index rows,
                                           Eigen::Index cols, ApplyFn apply,
                                           bool linear) {
  if (rows <= 0 || cols <= 0)
    throw ShapeError("forward operator: dimensions must be positive");
  if (!apply)
    throw PreconditionError("forward operator: missing apply callable");
  ForwardOperator op(OperatorKind::BlackBox, rows, cols, linear);
  op.fn_ = std::move(apply);
  return op;
}

ForwardOperator ForwardOperator::stacked(ForwardOperator top) {
  ForwardOperator op(OperatorKind::BlackBox, top.rows() + top.cols(),
                     top.cols(), top.is_linear());
  op.stacked_top_ = std::make_shared<const ForwardOperator>(std::move(top));
  return op;
}

const Eigen::MatrixXd& ForwardOperator::dense_matrix() const {
  if (!dense_)
    throw UnsupportedOperatorError(
        "forward operator: no stored dense matrix for kind '" +
        to_string(kind_) + "'; use materialize()");
  return *dense_;
}

void ForwardOperator::check_input(Eigen::Index got_rows) const {
  if (got_rows != cols_)
    throw ShapeError("forward operator: input has dimension " +
                     std::to_string(got_rows) + ", operator domain is " +
                     std::to_string(cols_));
}

Eigen::VectorXd ForwardOperator::apply(const Eigen::VectorXd& v) const {
  check_input(v.size());
  if (dense_) {
    Eigen::VectorXd out(rows_);
    out.noalias() = (*dense_) * v;
    return out;
  }
  if (stacked_top_) {
    Eigen::VectorXd out(rows_);
    out.head(stacked_top_->rows()) = stacked_top_->apply(v);
    out.tail(cols_) = v;
    return out;
  }
  Eigen::VectorXd out = fn_(v);
  if (out.size() != rows_)
    throw ShapeError("forward operator: callable returned dimension " +
                     std::to_string(out.size()) + ", declared range is " +
                     std::to_string(rows_));
  return out;
}

Eigen::MatrixXd ForwardOperator::apply_batch(
    const Eigen::MatrixXd& columns) const {
  check_input(columns.rows());
  Eigen::MatrixXd out(rows_, columns.cols());
  if (dense_) {
    // Same GEMV kernel as apply(), column by column, so batch output is
    // bitwise identical to individual applies.
    for (Eigen::Index j = 0; j < columns.cols(); ++j)
      out.col(j).noalias() = (*dense_) * columns.col(j);
    return out;
  }
  if (stacked_top_) {
    out.topRows(stacked_top_->rows()) = stacked_top_->apply_batch(columns);
    out.bottomRows(cols_) = columns;
    return out;
  }
  for (Eigen::Index j = 0; j < columns.cols(); ++j)
    out.col(j) = apply(columns.col(j));
  return out;
}

Eigen::MatrixXd ForwardOperator::materialize() const {
  if (dense_) return *dense_;
  if (!linear_)
    throw UnsupportedOperatorError(
        "forward operator: cannot materialize a nonlinear black-box map");
  if (stacked_top_) {
    Eigen::MatrixXd out(rows_, cols_);
    out.topRows(stacked_top_->rows()) = stacked_top_->materialize();
    out.bottomRows(cols_) =
        Eigen::MatrixXd::Identity(cols_, cols_);
    return out;
  }
  // Column probes with unit vectors.
  Eigen::MatrixXd out(rows_, cols_);
  Eigen::VectorXd e = Eigen::VectorXd::Zero(cols_);
  for (Eigen::Index j = 0; j < cols_; ++j) {
    e(j) = 1.0;
    out.col(j) = apply(e);
    e(j) = 0.0;
  }
  return out;
}

}  // namespace ekrmle
