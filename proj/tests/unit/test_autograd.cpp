#include "smlm/autograd.hpp"
#include "smlm/nn.hpp"

#include <gtest/gtest.h>

#include <functional>
#include <random>

namespace {

using smlm::ad::Matrix;
using smlm::ad::Var;
namespace ad = smlm::ad;

using ScalarFn = std::function<Var(const std::vector<Var>&)>;

Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return m;
}

// Compares reverse-mode gradients of fn against central differences.
void expect_gradients_match(const ScalarFn& fn, std::vector<Matrix> values, double tol = 1e-6) {
  std::vector<Var> params;
  for (const auto& v : values) params.push_back(ad::parameter(v));
  ad::backward(fn(params));

  const double h = 1e-6;
  for (std::size_t p = 0; p < values.size(); ++p) {
    const Matrix analytic = params[p].grad();
    for (Eigen::Index i = 0; i < values[p].size(); ++i) {
      auto eval_at = [&](double delta) {
        std::vector<Var> probe;
        for (std::size_t q = 0; q < values.size(); ++q) {
          Matrix m = values[q];
          if (q == p) m.data()[i] += delta;
          probe.push_back(ad::constant(m));
        }
        return fn(probe).scalar();
      };
      const double numeric = (eval_at(h) - eval_at(-h)) / (2 * h);
      EXPECT_NEAR(analytic.data()[i], numeric, tol * std::max(1.0, std::abs(numeric)))
          << "input " << p << " element " << i;
    }
  }
}

class AutogradTest : public ::testing::Test {
 protected:
  std::mt19937_64 rng{42};
};

TEST_F(AutogradTest, MatmulAndBroadcasts) {
  expect_gradients_match(
      [](const std::vector<Var>& v) {
        return ad::sum_all(ad::tanh(ad::add_row(ad::matmul(v[0], v[1]), v[2])));
      },
      {random_matrix(3, 4, rng), random_matrix(4, 5, rng), random_matrix(1, 5, rng)});
  expect_gradients_match(
      [](const std::vector<Var>& v) { return ad::mean_all(ad::mul_col(ad::matmul_nt(v[0], v[1]), v[2])); },
      {random_matrix(3, 4, rng), random_matrix(2, 4, rng), random_matrix(3, 1, rng)});
}

TEST_F(AutogradTest, ElementwiseOps) {
  expect_gradients_match(
      [](const std::vector<Var>& v) {
        const Var a = ad::sigmoid(v[0]);
        const Var b = ad::relu(ad::sub(v[1], ad::scale(v[0], 0.5)));
        return ad::sum_all(ad::mul(a, ad::add(b, ad::transpose(ad::transpose(v[1])))));
      },
      {random_matrix(3, 3, rng), random_matrix(3, 3, rng)});
}

TEST_F(AutogradTest, SoftmaxFamily) {
  const std::vector<int> targets{2, 0, -1, 4};
  expect_gradients_match(
      [&](const std::vector<Var>& v) { return ad::nll_rows(ad::log_softmax_rows(v[0]), targets); },
      {random_matrix(4, 5, rng)});
  expect_gradients_match(
      [&](const std::vector<Var>& v) {
        return ad::sum_all(ad::mul(ad::softmax_rows(v[0]), v[1]));
      },
      {random_matrix(3, 6, rng), random_matrix(3, 6, rng)});
}

TEST_F(AutogradTest, LayerNormAndNormalize) {
  expect_gradients_match(
      [](const std::vector<Var>& v) {
        return ad::sum_all(ad::mul(ad::layer_norm_rows(v[0], v[1], v[2]), v[3]));
      },
      {random_matrix(3, 6, rng), random_matrix(1, 6, rng), random_matrix(1, 6, rng), random_matrix(3, 6, rng)},
      1e-5);
  expect_gradients_match(
      [](const std::vector<Var>& v) { return ad::sum_all(ad::mul(ad::normalize_rows(v[0]), v[1])); },
      {random_matrix(4, 3, rng), random_matrix(4, 3, rng)});
}

TEST_F(AutogradTest, ShapeOps) {
  const std::vector<int> ids{3, 0, 3, 1};
  expect_gradients_match(
      [&](const std::vector<Var>& v) {
        const Var g = ad::gather_rows(v[0], ids);
        const Var parts[] = {ad::slice_rows(g, 1, 2), ad::slice_cols(v[1], 1, 3)};
        const Var stacked = ad::concat_rows(parts);
        const Var sides[] = {stacked, ad::scale(stacked, -2.0)};
        return ad::sum_all(ad::tanh(ad::concat_cols(sides)));
      },
      {random_matrix(5, 3, rng), random_matrix(2, 4, rng)});
  expect_gradients_match([](const std::vector<Var>& v) { return ad::sum_all(ad::mean_rows(ad::mul(v[0], v[0]))); },
                         {random_matrix(4, 3, rng)});
}

TEST_F(AutogradTest, DropoutUsesKeepMask) {
  Matrix keep(2, 2);
  keep << 1, 0, 0, 1;
  expect_gradients_match([&](const std::vector<Var>& v) { return ad::sum_all(ad::apply_dropout(v[0], keep, 0.5)); },
                         {random_matrix(2, 2, rng)});
  const Var x = ad::constant(Matrix::Ones(2, 2));
  const Matrix y = ad::apply_dropout(x, keep, 0.5).value();
  EXPECT_DOUBLE_EQ(y(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(y(0, 1), 0.0);
}

TEST_F(AutogradTest, GradientsAccumulateAcrossBackwardCalls) {
  Var w = ad::parameter(Matrix::Constant(1, 1, 3.0));
  ad::backward(ad::mul(w, w));
  ad::backward(ad::mul(w, w));
  EXPECT_DOUBLE_EQ(w.grad()(0, 0), 12.0);
  w.zero_grad();
  EXPECT_FALSE(w.has_grad());
}

TEST_F(AutogradTest, GradientsWrtLeavesLeaveParametersUntouched) {
  Var w = ad::parameter(random_matrix(3, 2, rng));
  const Var x = ad::parameter(random_matrix(1, 3, rng));
  const auto grads = ad::gradients(ad::sum_all(ad::matmul(x, w)), std::span<const Var>(&x, 1));
  ASSERT_EQ(grads.size(), 1u);
  EXPECT_TRUE(grads[0].isApprox(w.value().rowwise().sum().transpose()));
  EXPECT_FALSE(w.has_grad());
}

TEST_F(AutogradTest, NoGradGuardSkipsGraph) {
  const Var w = ad::parameter(random_matrix(2, 2, rng));
  {
    ad::NoGradGuard guard;
    EXPECT_FALSE(ad::grad_enabled());
    EXPECT_FALSE(ad::matmul(w, w).requires_grad());
  }
  EXPECT_TRUE(ad::grad_enabled());
  EXPECT_TRUE(ad::matmul(w, w).requires_grad());
}

TEST_F(AutogradTest, LstmAndAttentionLayersBackpropagate) {
  smlm::nn::Rng init(3);
  smlm::nn::ParamList params;
  smlm::nn::Lstm lstm(params, "lstm", 3, 4, init);
  smlm::nn::MultiHeadSelfAttention attn(params, "attn", 4, 2, init);
  const Matrix x = random_matrix(5, 3, rng);
  expect_gradients_match(
      [&](const std::vector<Var>& v) { return ad::sum_all(ad::tanh(attn(lstm(v[0], true)))); }, {x}, 1e-5);
}

TEST(ClipGradNorm, ScalesToThreshold) {
  Var a = ad::parameter(Matrix::Zero(1, 2));
  Var b = ad::parameter(Matrix::Zero(1, 1));
  a.node()->grad = (Matrix(1, 2) << 3.0, 0.0).finished();
  b.node()->grad = Matrix::Constant(1, 1, 4.0);
  const std::vector<Var> params{a, b};
  EXPECT_DOUBLE_EQ(smlm::nn::clip_grad_norm(params, 1e-3), 5.0);
  EXPECT_NEAR(smlm::nn::global_grad_norm(params), 1e-3, 1e-15);
}

}  // namespace
