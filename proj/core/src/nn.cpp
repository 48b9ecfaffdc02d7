#include "smlm/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace smlm::nn {

Matrix xavier_uniform(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Matrix normal_init(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Matrix bernoulli_keep_mask(Eigen::Index rows, Eigen::Index cols, double drop_p, Rng& rng) {
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng) < drop_p ? 0.0 : 1.0;
  return m;
}

Var ParamList::add(std::string name, Matrix init) {
  for (const auto& p : items_) {
    if (p.name == name) throw std::invalid_argument("duplicate parameter name: " + name);
  }
  Var v = ad::parameter(std::move(init));
  items_.push_back({std::move(name), v});
  return v;
}

void ParamList::extend(const std::string& prefix, const ParamList& other) {
  for (const auto& p : other.items_) items_.push_back({prefix + p.name, p.var});
}

std::vector<Var> ParamList::vars() const {
  std::vector<Var> out;
  out.reserve(items_.size());
  for (const auto& p : items_) out.push_back(p.var);
  return out;
}

std::size_t ParamList::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : items_) n += static_cast<std::size_t>(p.var.value().size());
  return n;
}

void ParamList::zero_grad() {
  for (auto& p : items_) p.var.zero_grad();
}

bool ParamList::all_finite() const {
  for (const auto& p : items_) {
    if (!p.var.value().allFinite()) return false;
  }
  return true;
}

Linear::Linear(ParamList& params, const std::string& name, Eigen::Index in, Eigen::Index out, Rng& rng)
    : weight(params.add(name + ".weight", xavier_uniform(in, out, rng))),
      bias(params.add(name + ".bias", Matrix::Zero(1, out))) {}

Var Linear::operator()(const Var& x) const { return ad::add_row(ad::matmul(x, weight), bias); }

LayerNorm::LayerNorm(ParamList& params, const std::string& name, Eigen::Index dim)
    : gain(params.add(name + ".gain", Matrix::Ones(1, dim))),
      bias(params.add(name + ".bias", Matrix::Zero(1, dim))) {}

Var LayerNorm::operator()(const Var& x) const { return ad::layer_norm_rows(x, gain, bias); }

Lstm::Lstm(ParamList& params, const std::string& name, Eigen::Index in, Eigen::Index hidden_size, Rng& rng)
    : hidden(hidden_size) {
  input_weight = params.add(name + ".input_weight", xavier_uniform(in, 4 * hidden_size, rng));
  recurrent_weight = params.add(name + ".recurrent_weight", xavier_uniform(hidden_size, 4 * hidden_size, rng));
  bias = params.add(name + ".bias", Matrix::Zero(1, 4 * hidden_size));
}

Var Lstm::operator()(const Var& inputs, bool reverse) const {
  const Eigen::Index steps = inputs.rows();
  const Var projected = ad::add_row(ad::matmul(inputs, input_weight), bias);
  Var h = ad::constant(Matrix::Zero(1, hidden));
  Var c = ad::constant(Matrix::Zero(1, hidden));
  std::vector<Var> outputs(static_cast<std::size_t>(steps));
  for (Eigen::Index k = 0; k < steps; ++k) {
    const Eigen::Index t = reverse ? steps - 1 - k : k;
    const Var gates = ad::add(ad::slice_rows(projected, t, 1), ad::matmul(h, recurrent_weight));
    const Var i = ad::sigmoid(ad::slice_cols(gates, 0, hidden));
    const Var f = ad::sigmoid(ad::slice_cols(gates, hidden, hidden));
    const Var g = ad::tanh(ad::slice_cols(gates, 2 * hidden, hidden));
    const Var o = ad::sigmoid(ad::slice_cols(gates, 3 * hidden, hidden));
    c = ad::add(ad::mul(f, c), ad::mul(i, g));
    h = ad::mul(o, ad::tanh(c));
    outputs[static_cast<std::size_t>(t)] = h;
  }
  return ad::concat_rows(outputs);
}

MultiHeadSelfAttention::MultiHeadSelfAttention(ParamList& params, const std::string& name, Eigen::Index dim,
                                               int num_heads, Rng& rng)
    : query(params, name + ".query", dim, dim, rng),
      key(params, name + ".key", dim, dim, rng),
      value(params, name + ".value", dim, dim, rng),
      output(params, name + ".output", dim, dim, rng),
      heads(num_heads) {
  if (num_heads <= 0 || dim % num_heads != 0) {
    throw std::invalid_argument("attention dim must be divisible by head count");
  }
}

Var MultiHeadSelfAttention::operator()(const Var& x) const {
  const Eigen::Index dim = x.cols();
  const Eigen::Index head_dim = dim / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  const Var q = query(x);
  const Var k = key(x);
  const Var v = value(x);
  std::vector<Var> per_head;
  per_head.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    const Eigen::Index at = h * head_dim;
    const Var qh = ad::slice_cols(q, at, head_dim);
    const Var kh = ad::slice_cols(k, at, head_dim);
    const Var vh = ad::slice_cols(v, at, head_dim);
    const Var weights = ad::softmax_rows(ad::scale(ad::matmul_nt(qh, kh), inv_sqrt));
    per_head.push_back(ad::matmul(weights, vh));
  }
  return output(ad::concat_cols(per_head));
}

TransformerEncoderLayer::TransformerEncoderLayer(ParamList& params, const std::string& name, Eigen::Index dim,
                                                 int heads, Eigen::Index ff_dim, double dropout_p, Rng& rng)
    : attention(params, name + ".attention", dim, heads, rng),
      norm1(params, name + ".norm1", dim),
      norm2(params, name + ".norm2", dim),
      ff1(params, name + ".ff1", dim, ff_dim, rng),
      ff2(params, name + ".ff2", ff_dim, dim, rng),
      dropout(dropout_p) {}

Var TransformerEncoderLayer::operator()(const Var& x, bool training, Rng* rng) const {
  auto drop = [&](const Var& v) {
    if (!training || dropout <= 0.0 || rng == nullptr) return v;
    return ad::apply_dropout(v, bernoulli_keep_mask(v.rows(), v.cols(), dropout, *rng), dropout);
  };
  const Var attended = ad::add(x, drop(attention(norm1(x))));
  return ad::add(attended, drop(ff2(ad::relu(ff1(norm2(attended))))));
}

Adam::Adam(std::vector<Var> params, AdamConfig config) : params_(std::move(params)), config_(config) {
  for (const auto& p : params_) {
    m_.push_back(Matrix::Zero(p.rows(), p.cols()));
    v_.push_back(Matrix::Zero(p.rows(), p.cols()));
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].has_grad()) continue;
    const Matrix g = params_[i].grad();
    m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * g;
    v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * g.cwiseProduct(g);
    const Matrix m_hat = m_[i] / bc1;
    const Matrix v_hat = v_[i] / bc2;
    params_[i].mutable_value().array() -=
        config_.learning_rate * m_hat.array() / (v_hat.array().sqrt() + config_.epsilon);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

double global_grad_norm(const std::vector<Var>& params) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (p.has_grad()) sq += p.grad().squaredNorm();
  }
  return std::sqrt(sq);
}

double clip_grad_norm(const std::vector<Var>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm > max_norm && norm > 0.0) {
    const double factor = max_norm / norm;
    for (const auto& p : params) {
      if (p.has_grad()) p.node()->grad *= factor;
    }
  }
  return norm;
}

}  // namespace smlm::nn
