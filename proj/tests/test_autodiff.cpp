#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "audioslots/autodiff.hpp"
#include "support/gradcheck.hpp"
#include "support/op_cases.hpp"

using namespace audioslots;
using audioslots::testing::grad_check;

TEST(Tensor, ShapeAndFill) {
  Tensor<float> t({2, 3}, 1.5f);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_FLOAT_EQ(t.data[5], 1.5f);
  EXPECT_THROW(Tensor<float>({2, 0}), ShapeError);
  EXPECT_THROW(Tensor<float>({2, 2}, std::vector<float>(3)), ShapeError);
}

TEST(Tensor, ScalarHasOneElement) {
  const auto s = Tensor<double>::scalar(4.0);
  EXPECT_EQ(s.rank(), 0u);
  EXPECT_DOUBLE_EQ(s.item(), 4.0);
  EXPECT_THROW(Tensor<double>({2}).item(), ShapeError);
}

TEST(Broadcast, TrailingDimensions) {
  const auto p = audioslots::detail::plan_broadcast({2, 1, 4}, {3, 1});
  EXPECT_EQ(p.out, (Shape{2, 3, 4}));
  EXPECT_THROW(audioslots::detail::plan_broadcast({2, 3}, {4, 3}), ShapeError);
}

TEST(Autodiff, ForwardValues) {
  ad::Tape<double> t;
  auto a = t.constant(Tensor<double>({2, 2}, {1, 2, 3, 4}));
  auto b = t.constant(Tensor<double>({2}, {10, 20}));
  EXPECT_EQ(ad::add(a, b).value().data, (std::vector<double>{11, 22, 13, 24}));
  EXPECT_EQ(ad::sub(a, b).value().data, (std::vector<double>{-9, -18, -7, -16}));
  EXPECT_EQ(ad::mul(a, b).value().data, (std::vector<double>{10, 40, 30, 80}));
  EXPECT_EQ(ad::matmul(a, a).value().data, (std::vector<double>{7, 10, 15, 22}));
  EXPECT_EQ(ad::transpose(a).value().data, (std::vector<double>{1, 3, 2, 4}));
  EXPECT_DOUBLE_EQ(ad::sum(a).value().item(), 10.0);
  EXPECT_DOUBLE_EQ(ad::mean(a).value().item(), 2.5);
  const auto sm = ad::softmax(a).value().data;
  EXPECT_NEAR(sm[0] + sm[1], 1.0, 1e-15);
  EXPECT_NEAR(sm[1] / sm[0], std::exp(1.0), 1e-12);
}

TEST(Autodiff, ReluDerivativeAtZeroIsZero) {
  ad::Tape<double> t;
  auto x = t.variable(Tensor<double>({3}, {-1.0, 0.0, 2.0}));
  auto y = ad::sum(ad::relu(x));
  t.backward(y);
  EXPECT_EQ(t.grad(x).data, (std::vector<double>{0.0, 0.0, 1.0}));
}

TEST(Autodiff, ConvMatchesDirectSum) {
  std::mt19937_64 rng(3);
  const auto x = audioslots::testing::random_tensor({2, 5, 4}, rng);
  const auto k = audioslots::testing::random_tensor({3, 2, 3, 3}, rng);
  ad::Tape<double> t;
  const auto y = ad::conv2d(t.constant(x), t.constant(k), 2, 1).value();
  ASSERT_EQ(y.shape, (Shape{3, 3, 2}));
  for (std::size_t o = 0; o < 3; ++o)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 2; ++j) {
        double acc = 0.0;
        for (std::size_t c = 0; c < 2; ++c)
          for (std::size_t u = 0; u < 3; ++u)
            for (std::size_t v = 0; v < 3; ++v) {
              const long r = static_cast<long>(2 * i + u) - 1, s = static_cast<long>(2 * j + v) - 1;
              if (r < 0 || s < 0 || r >= 5 || s >= 4) continue;
              acc += x.data[(c * 5 + static_cast<std::size_t>(r)) * 4 + static_cast<std::size_t>(s)] *
                     k.data[((o * 2 + c) * 3 + u) * 3 + v];
            }
        EXPECT_NEAR(y.data[(o * 3 + i) * 2 + j], acc, 1e-12);
      }
}

TEST(Autodiff, LayerNormHasZeroMeanUnitVariance) {
  std::mt19937_64 rng(5);
  ad::Tape<double> t;
  auto x = t.constant(audioslots::testing::random_tensor({2, 64}, rng));
  auto y = ad::layer_norm(x, t.constant(Tensor<double>({64}, 1.0)), t.constant(Tensor<double>({64}, 0.0)), 0.0);
  for (std::size_t r = 0; r < 2; ++r) {
    double m = 0.0, v = 0.0;
    for (std::size_t i = 0; i < 64; ++i) m += y.value().data[r * 64 + i];
    m /= 64;
    for (std::size_t i = 0; i < 64; ++i) v += std::pow(y.value().data[r * 64 + i] - m, 2);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v / 64, 1.0, 1e-9);
  }
}

TEST(Autodiff, GradientsAccumulateOverReuse) {
  ad::Tape<double> t;
  auto x = t.variable(Tensor<double>({2}, {3.0, -1.0}));
  auto y = ad::sum(ad::add(ad::mul(x, x), x));  // d/dx = 2x + 1
  t.backward(y);
  EXPECT_EQ(t.grad(x).data, (std::vector<double>{7.0, -1.0}));
}

TEST(Autodiff, ParameterGradientFlowsIntoParameter) {
  ad::Parameter<double> p("w", Tensor<double>({2}, {1.0, 2.0}));
  ad::Tape<double> t;
  auto w = t.parameter(p);
  t.backward(ad::sum(ad::scale(w, 3.0)));
  EXPECT_EQ(p.grad.data, (std::vector<double>{3.0, 3.0}));
}

TEST(Autodiff, BackwardContract) {
  ad::Tape<double> t;
  auto x = t.variable(Tensor<double>({2}, 1.0));
  EXPECT_THROW(t.backward(x), InvalidArgument);
  auto y = ad::sum(x);
  t.backward(y);
  EXPECT_THROW(t.backward(y), InvalidArgument);
}

TEST(Autodiff, NonFiniteValuesAreRejected) {
  ad::Tape<double> t;
  auto x = t.variable(Tensor<double>({1}, -1.0));
  EXPECT_THROW(ad::power(x, 0.5), NumericError);
}

TEST(Autodiff, ShapeErrors) {
  ad::Tape<double> t;
  auto a = t.variable(Tensor<double>({2, 3}));
  auto b = t.variable(Tensor<double>({4, 3}));
  EXPECT_THROW(ad::add(a, b), ShapeError);
  EXPECT_THROW(ad::matmul(a, a), ShapeError);
  EXPECT_THROW(ad::reshape(a, {5}), ShapeError);
  ad::Tape<double> other;
  auto c = other.variable(Tensor<double>({2, 3}));
  EXPECT_THROW(ad::add(a, c), InvalidArgument);
}

TEST(Autodiff, GradDisabledTapeKeepsNoClosures) {
  ad::Parameter<float> p("w", Tensor<float>({2}, 1.0f));
  ad::Tape<float> t;
  t.set_grad_enabled(false);
  auto w = t.parameter(p);
  EXPECT_FALSE(w.requires_grad());
  EXPECT_FALSE(ad::relu(w).requires_grad());
}

class OpGradient : public ::testing::TestWithParam<std::size_t> {};

TEST_P(OpGradient, MatchesCentralDifferencesOverSeeds) {
  const auto cases = audioslots::testing::op_cases();
  const auto& c = cases[GetParam()];
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed * 7919 + GetParam());
    const auto r = grad_check(c.fn, c.inputs(rng));
    EXPECT_LT(r.max_rel_error, 1e-4) << c.name << " seed " << seed;
  }
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::Range<std::size_t>(0, audioslots::testing::op_cases().size()),
                         [](const ::testing::TestParamInfo<std::size_t>& info) {
                           return audioslots::testing::op_cases()[info.param].name;
                         });
