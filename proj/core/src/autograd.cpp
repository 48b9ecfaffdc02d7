#include "smlm/autograd.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace smlm::ad {

namespace {

thread_local bool t_grad_enabled = true;
thread_local const std::unordered_set<const Node*>* t_leaf_filter = nullptr;

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

Node& in(Node& n, std::size_t i) { return *n.inputs[i]; }

}  // namespace

bool Node::accepts_grad() const {
  return t_leaf_filter == nullptr || backward_fn || t_leaf_filter->count(this) > 0;
}

void Node::accumulate(const Matrix& delta) {
  if (!accepts_grad()) return;
  if (grad.size() == 0) {
    grad = delta;
  } else {
    grad += delta;
  }
}

Var::Var(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Matrix Var::grad() const {
  if (node_->grad.size() == 0) {
    return Matrix::Zero(node_->value.rows(), node_->value.cols());
  }
  return node_->grad;
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

Var make_result(Matrix value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn) {
  Var out;
  out.node_ = std::make_shared<Node>();
  out.node_->value = std::move(value);
  if (!t_grad_enabled) return out;
  bool needs = false;
  for (const auto& v : inputs) needs = needs || v.requires_grad();
  if (!needs) return out;
  out.node_->requires_grad = true;
  out.node_->inputs.reserve(inputs.size());
  for (auto& v : inputs) out.node_->inputs.push_back(v.node());
  out.node_->backward_fn = std::move(backward_fn);
  return out;
}

void backward(const Var& root) {
  if (root.rows() != 1 || root.cols() != 1) {
    throw std::invalid_argument("backward: root must be a scalar");
  }
  if (!root.requires_grad()) return;

  // Iterative post-order DFS; recurrent graphs are deep.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.size() != 0) n->backward_fn(*n);
  }
  // Release intermediate gradients so repeated passes over shared
  // parameters only accumulate into leaves.
  for (Node* n : order) {
    if (n->backward_fn) n->grad.resize(0, 0);
  }
}

std::vector<Matrix> gradients(const Var& root, std::span<const Var> wrt) {
  std::unordered_set<const Node*> filter;
  for (const auto& v : wrt) {
    filter.insert(v.node().get());
    v.node()->grad.resize(0, 0);
  }
  t_leaf_filter = &filter;
  try {
    backward(root);
  } catch (...) {
    t_leaf_filter = nullptr;
    throw;
  }
  t_leaf_filter = nullptr;
  std::vector<Matrix> out;
  out.reserve(wrt.size());
  for (const auto& v : wrt) {
    out.push_back(v.grad());
    v.node()->grad.resize(0, 0);
  }
  return out;
}

Var constant(Matrix value) { return Var(std::move(value), false); }
Var parameter(Matrix value) { return Var(std::move(value), true); }

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  return make_result(a.value() * b.value(), {a, b}, [](Node& n) {
    Node& x = in(n, 0);
    Node& y = in(n, 1);
    if (x.requires_grad) x.accumulate(n.grad * y.value.transpose());
    if (y.requires_grad) y.accumulate(x.value.transpose() * n.grad);
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: inner dimension mismatch");
  return make_result(a.value() * b.value().transpose(), {a, b}, [](Node& n) {
    Node& x = in(n, 0);
    Node& y = in(n, 1);
    if (x.requires_grad) x.accumulate(n.grad * y.value);
    if (y.requires_grad) y.accumulate(n.grad.transpose() * x.value);
  });
}

Var transpose(const Var& a) {
  return make_result(a.value().transpose(), {a},
                     [](Node& n) { in(n, 0).accumulate(n.grad.transpose()); });
}

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  return make_result(a.value() + b.value(), {a, b}, [](Node& n) {
    if (in(n, 0).requires_grad) in(n, 0).accumulate(n.grad);
    if (in(n, 1).requires_grad) in(n, 1).accumulate(n.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  return make_result(a.value() - b.value(), {a, b}, [](Node& n) {
    if (in(n, 0).requires_grad) in(n, 0).accumulate(n.grad);
    if (in(n, 1).requires_grad) in(n, 1).accumulate(-n.grad);
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  return make_result(a.value().cwiseProduct(b.value()), {a, b}, [](Node& n) {
    Node& x = in(n, 0);
    Node& y = in(n, 1);
    if (x.requires_grad) x.accumulate(n.grad.cwiseProduct(y.value));
    if (y.requires_grad) y.accumulate(n.grad.cwiseProduct(x.value));
  });
}

Var scale(const Var& a, double s) {
  return make_result(a.value() * s, {a}, [s](Node& n) { in(n, 0).accumulate(n.grad * s); });
}

Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("add_row: shape mismatch");
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  return make_result(std::move(out), {a, row}, [](Node& n) {
    if (in(n, 0).requires_grad) in(n, 0).accumulate(n.grad);
    if (in(n, 1).requires_grad) in(n, 1).accumulate(n.grad.colwise().sum());
  });
}

Var mul_col(const Var& a, const Var& col) {
  if (col.cols() != 1 || col.rows() != a.rows()) throw std::invalid_argument("mul_col: shape mismatch");
  Matrix out = a.value().array().colwise() * col.value().col(0).array();
  return make_result(std::move(out), {a, col}, [](Node& n) {
    Node& x = in(n, 0);
    Node& c = in(n, 1);
    if (x.requires_grad) {
      Matrix d = n.grad.array().colwise() * c.value.col(0).array();
      x.accumulate(d);
    }
    if (c.requires_grad) c.accumulate(n.grad.cwiseProduct(x.value).rowwise().sum());
  });
}

Var tanh(const Var& a) {
  Matrix out = a.value().array().tanh();
  return make_result(out, {a}, [out](Node& n) {
    in(n, 0).accumulate(n.grad.cwiseProduct((1.0 - out.array().square()).matrix()));
  });
}

Var sigmoid(const Var& a) {
  Matrix out = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  return make_result(out, {a}, [out](Node& n) {
    in(n, 0).accumulate(n.grad.cwiseProduct((out.array() * (1.0 - out.array())).matrix()));
  });
}

Var relu(const Var& a) {
  Matrix out = a.value().cwiseMax(0.0);
  return make_result(out, {a}, [](Node& n) {
    Matrix d = (in(n, 0).value.array() > 0.0).select(n.grad, 0.0);
    in(n, 0).accumulate(d);
  });
}

Var softmax_rows(const Var& a) {
  Matrix out(a.rows(), a.cols());
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    const double mx = a.value().row(r).maxCoeff();
    out.row(r) = (a.value().row(r).array() - mx).exp();
    out.row(r) /= out.row(r).sum();
  }
  return make_result(out, {a}, [out](Node& n) {
    Matrix d(out.rows(), out.cols());
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
      const double dot = n.grad.row(r).dot(out.row(r));
      d.row(r) = out.row(r).cwiseProduct((n.grad.row(r).array() - dot).matrix());
    }
    in(n, 0).accumulate(d);
  });
}

Var log_softmax_rows(const Var& a) {
  Matrix out(a.rows(), a.cols());
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    const double mx = a.value().row(r).maxCoeff();
    const double lse = mx + std::log((a.value().row(r).array() - mx).exp().sum());
    out.row(r) = a.value().row(r).array() - lse;
  }
  return make_result(out, {a}, [out](Node& n) {
    Matrix d(out.rows(), out.cols());
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
      const double s = n.grad.row(r).sum();
      d.row(r) = n.grad.row(r) - (out.row(r).array().exp() * s).matrix();
    }
    in(n, 0).accumulate(d);
  });
}

Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias, double eps) {
  const Eigen::Index rows = x.rows();
  const Eigen::Index cols = x.cols();
  if (gain.cols() != cols || bias.cols() != cols) throw std::invalid_argument("layer_norm_rows: shape mismatch");
  Matrix xhat(rows, cols);
  Eigen::VectorXd inv_std(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double mean = x.value().row(r).mean();
    const auto centered = (x.value().row(r).array() - mean).eval();
    const double var = centered.square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = centered * inv_std(r);
  }
  Matrix out = xhat.array().rowwise() * gain.value().row(0).array();
  out.rowwise() += bias.value().row(0);
  return make_result(std::move(out), {x, gain, bias}, [xhat, inv_std](Node& n) {
    Node& xn = in(n, 0);
    Node& g = in(n, 1);
    Node& b = in(n, 2);
    if (g.requires_grad) g.accumulate(n.grad.cwiseProduct(xhat).colwise().sum());
    if (b.requires_grad) b.accumulate(n.grad.colwise().sum());
    if (xn.requires_grad) {
      const double cols = static_cast<double>(xhat.cols());
      Matrix d(xhat.rows(), xhat.cols());
      for (Eigen::Index r = 0; r < xhat.rows(); ++r) {
        const auto dxhat = (n.grad.row(r).array() * g.value.row(0).array()).eval();
        const double m1 = dxhat.sum() / cols;
        const double m2 = (dxhat * xhat.row(r).array()).sum() / cols;
        d.row(r) = (inv_std(r) * (dxhat - m1 - xhat.row(r).array() * m2)).matrix();
      }
      xn.accumulate(d);
    }
  });
}

Var normalize_rows(const Var& x, double eps) {
  Eigen::VectorXd norms = x.value().rowwise().norm();
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    out.row(r) = x.value().row(r) / std::max(norms(r), eps);
  }
  return make_result(out, {x}, [out, norms, eps](Node& n) {
    Matrix d(out.rows(), out.cols());
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
      if (norms(r) < eps) {
        d.row(r) = n.grad.row(r) / eps;
      } else {
        const double proj = n.grad.row(r).dot(out.row(r));
        d.row(r) = (n.grad.row(r) - proj * out.row(r)) / norms(r);
      }
    }
    in(n, 0).accumulate(d);
  });
}

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw std::out_of_range("slice_rows");
  return make_result(a.value().middleRows(start, count), {a}, [start, count](Node& n) {
    Node& x = in(n, 0);
    Matrix d = Matrix::Zero(x.value.rows(), x.value.cols());
    d.middleRows(start, count) = n.grad;
    x.accumulate(d);
  });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw std::out_of_range("slice_cols");
  return make_result(a.value().middleCols(start, count), {a}, [start, count](Node& n) {
    Node& x = in(n, 0);
    Matrix d = Matrix::Zero(x.value.rows(), x.value.cols());
    d.middleCols(start, count) = n.grad;
    x.accumulate(d);
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts.front().cols();
  for (const auto& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<Eigen::Index> offsets;
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    offsets.push_back(at);
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return make_result(std::move(out), std::vector<Var>(parts.begin(), parts.end()), [offsets](Node& n) {
    for (std::size_t i = 0; i < n.inputs.size(); ++i) {
      Node& x = *n.inputs[i];
      if (x.requires_grad) x.accumulate(n.grad.middleRows(offsets[i], x.value.rows()));
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
  Eigen::Index cols = 0;
  const Eigen::Index rows = parts.front().rows();
  for (const auto& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<Eigen::Index> offsets;
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    offsets.push_back(at);
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return make_result(std::move(out), std::vector<Var>(parts.begin(), parts.end()), [offsets](Node& n) {
    for (std::size_t i = 0; i < n.inputs.size(); ++i) {
      Node& x = *n.inputs[i];
      if (x.requires_grad) x.accumulate(n.grad.middleCols(offsets[i], x.value.cols()));
    }
  });
}

Var gather_rows(const Var& table, std::span<const int> ids) {
  Matrix out(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table.rows()) throw std::out_of_range("gather_rows: id out of range");
    out.row(static_cast<Eigen::Index>(i)) = table.value().row(ids[i]);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return make_result(std::move(out), {table}, [idx = std::move(idx)](Node& n) {
    Node& t = in(n, 0);
    if (!t.accepts_grad()) return;
    if (t.grad.size() == 0) t.grad = Matrix::Zero(t.value.rows(), t.value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      t.grad.row(idx[i]) += n.grad.row(static_cast<Eigen::Index>(i));
    }
  });
}

Var sum_all(const Var& a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return make_result(std::move(out), {a}, [](Node& n) {
    Node& x = in(n, 0);
    x.accumulate(Matrix::Constant(x.value.rows(), x.value.cols(), n.grad(0, 0)));
  });
}

Var mean_all(const Var& a) {
  const double count = static_cast<double>(a.value().size());
  return scale(sum_all(a), 1.0 / count);
}

Var mean_rows(const Var& a) {
  const double count = static_cast<double>(a.rows());
  Matrix out = a.value().colwise().sum() / count;
  return make_result(std::move(out), {a}, [count](Node& n) {
    Node& x = in(n, 0);
    Matrix d(x.value.rows(), x.value.cols());
    d.rowwise() = n.grad.row(0) / count;
    x.accumulate(d);
  });
}

Var nll_rows(const Var& log_probs, std::span<const int> targets) {
  if (static_cast<Eigen::Index>(targets.size()) != log_probs.rows()) {
    throw std::invalid_argument("nll_rows: target count mismatch");
  }
  std::vector<int> tgt(targets.begin(), targets.end());
  double total = 0.0;
  int count = 0;
  for (std::size_t r = 0; r < tgt.size(); ++r) {
    if (tgt[r] < 0) continue;
    if (tgt[r] >= log_probs.cols()) throw std::out_of_range("nll_rows: target out of range");
    total -= log_probs.value()(static_cast<Eigen::Index>(r), tgt[r]);
    ++count;
  }
  Matrix out(1, 1);
  out(0, 0) = count > 0 ? total / count : 0.0;
  return make_result(std::move(out), {log_probs}, [tgt = std::move(tgt), count](Node& n) {
    if (count == 0) return;
    Node& x = in(n, 0);
    Matrix d = Matrix::Zero(x.value.rows(), x.value.cols());
    const double g = n.grad(0, 0) / count;
    for (std::size_t r = 0; r < tgt.size(); ++r) {
      if (tgt[r] >= 0) d(static_cast<Eigen::Index>(r), tgt[r]) = -g;
    }
    x.accumulate(d);
  });
}

Var apply_dropout(const Var& a, const Matrix& keep_mask, double p) {
  if (p <= 0.0) return a;
  const double s = 1.0 / (1.0 - p);
  Matrix m = keep_mask * s;
  return make_result(a.value().cwiseProduct(m), {a},
                     [m](Node& n) { in(n, 0).accumulate(n.grad.cwiseProduct(m)); });
}

}  // namespace smlm::ad
