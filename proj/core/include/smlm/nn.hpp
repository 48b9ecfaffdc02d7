#pragma once

// Neural building blocks on top of the autodiff core: parameter registry,
// dense/recurrent/attention layers, and the Adam optimizer.

#include "smlm/autograd.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace smlm::nn {

using ad::Matrix;
using ad::Var;

using Rng = std::mt19937_64;

Matrix xavier_uniform(Eigen::Index rows, Eigen::Index cols, Rng& rng);
Matrix normal_init(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng);
Matrix bernoulli_keep_mask(Eigen::Index rows, Eigen::Index cols, double drop_p, Rng& rng);

struct NamedParam {
  std::string name;
  Var var;
};

// Ordered registry; names are unique and the order is the serialization order.
class ParamList {
 public:
  Var add(std::string name, Matrix init);
  void extend(const std::string& prefix, const ParamList& other);

  std::vector<Var> vars() const;
  const std::vector<NamedParam>& items() const { return items_; }
  std::size_t scalar_count() const;
  void zero_grad();
  bool all_finite() const;

 private:
  std::vector<NamedParam> items_;
};

struct Linear {
  Var weight;  // in x out
  Var bias;    // 1 x out

  Linear() = default;
  Linear(ParamList& params, const std::string& name, Eigen::Index in, Eigen::Index out, Rng& rng);
  Var operator()(const Var& x) const;
};

struct LayerNorm {
  Var gain;
  Var bias;

  LayerNorm() = default;
  LayerNorm(ParamList& params, const std::string& name, Eigen::Index dim);
  Var operator()(const Var& x) const;
};

// Single-layer LSTM over a sequence laid out as rows (T x in -> T x hidden).
// Gate column order: input, forget, cell, output.
struct Lstm {
  Var input_weight;      // in x 4H
  Var recurrent_weight;  // H x 4H
  Var bias;              // 1 x 4H
  Eigen::Index hidden = 0;

  Lstm() = default;
  Lstm(ParamList& params, const std::string& name, Eigen::Index in, Eigen::Index hidden, Rng& rng);
  Var operator()(const Var& inputs, bool reverse = false) const;
};

struct MultiHeadSelfAttention {
  Linear query, key, value, output;
  int heads = 1;

  MultiHeadSelfAttention() = default;
  MultiHeadSelfAttention(ParamList& params, const std::string& name, Eigen::Index dim, int heads, Rng& rng);
  Var operator()(const Var& x) const;
};

// Pre-norm encoder block: x + attn(ln(x)), then x + ffn(ln(x)).
struct TransformerEncoderLayer {
  MultiHeadSelfAttention attention;
  LayerNorm norm1, norm2;
  Linear ff1, ff2;
  double dropout = 0.0;

  TransformerEncoderLayer() = default;
  TransformerEncoderLayer(ParamList& params, const std::string& name, Eigen::Index dim, int heads,
                          Eigen::Index ff_dim, double dropout, Rng& rng);
  // rng is consulted only when training with dropout > 0.
  Var operator()(const Var& x, bool training, Rng* rng) const;
};

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Adam {
 public:
  Adam(std::vector<Var> params, AdamConfig config);
  void step();
  void zero_grad();
  std::int64_t steps() const { return t_; }

 private:
  std::vector<Var> params_;
  std::vector<Matrix> m_, v_;
  AdamConfig config_;
  std::int64_t t_ = 0;
};

double global_grad_norm(const std::vector<Var>& params);
// Rescales gradients so the global L2 norm is at most max_norm; returns the
// norm measured before clipping.
double clip_grad_norm(const std::vector<Var>& params, double max_norm);

}  // namespace smlm::nn
