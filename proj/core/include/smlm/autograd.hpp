#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. Every value is a 2-D matrix; scalars are 1x1.

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace smlm::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  void accumulate(const Matrix& delta);
  // False for leaves excluded by an active `gradients()` call.
  bool accepts_grad() const;
};

class Var {
 public:
  Var() = default;
  explicit Var(Matrix value, bool requires_grad = false);

  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  // Zero matrix of the value's shape when no gradient has flowed yet.
  Matrix grad() const;
  bool has_grad() const { return node_->grad.size() != 0; }
  void zero_grad() { node_->grad.resize(0, 0); }
  bool requires_grad() const { return node_->requires_grad; }

  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double scalar() const { return node_->value(0, 0); }

  bool defined() const { return static_cast<bool>(node_); }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  friend Var make_result(Matrix, std::vector<Var>, std::function<void(Node&)>);
  std::shared_ptr<Node> node_;
};

// Creates an op result; records the graph edge only when an input needs a
// gradient and recording is enabled on this thread.
Var make_result(Matrix value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn);

// Seeds d(root)/d(root) = 1 (root must be 1x1) and propagates to every
// reachable node that requires a gradient. Gradients accumulate.
void backward(const Var& root);

// Gradient of a scalar root w.r.t. the given leaves only. Other leaves
// (e.g. model parameters) are left untouched, so this is safe to call on a
// shared model from several threads.
std::vector<Matrix> gradients(const Var& root, std::span<const Var> wrt);

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

Var constant(Matrix value);
Var parameter(Matrix value);

// Linear algebra
Var matmul(const Var& a, const Var& b);
Var matmul_nt(const Var& a, const Var& b);  // a * b^T
Var transpose(const Var& a);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);  // elementwise
Var scale(const Var& a, double s);
Var add_row(const Var& a, const Var& row);  // broadcast 1xC over rows
Var mul_col(const Var& a, const Var& col);  // broadcast Rx1 over columns

// Elementwise nonlinearities
Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var relu(const Var& a);

// Row-wise operations
Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);
Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);
// x / max(||x||, eps), per row
Var normalize_rows(const Var& x, double eps = 1e-8);

// Shape
Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var gather_rows(const Var& table, std::span<const int> ids);

// Reductions
Var sum_all(const Var& a);
Var mean_all(const Var& a);
Var mean_rows(const Var& a);  // 1xC column means

// Mean negative log-likelihood over rows of a log-probability matrix.
// Rows with a negative target are skipped; returns 0 when none remain.
Var nll_rows(const Var& log_probs, std::span<const int> targets);

// Inverted dropout with a caller-provided keep mask (1 = keep).
Var apply_dropout(const Var& a, const Matrix& keep_mask, double p);

}  // namespace smlm::ad
