#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "audioslots/matching.hpp"
#include "support/gradcheck.hpp"

using namespace audioslots;
using matching::CostMatrix;

namespace {

// Exhaustive minimum over all permutations; ties keep the first found in
// lexicographic order.
matching::Assignment brute_force(const CostMatrix& c) {
  std::vector<std::size_t> p(c.rows);
  std::iota(p.begin(), p.end(), 0);
  matching::Assignment best;
  best.total_cost = std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) s += c.at(i, p[i]);
    if (s < best.total_cost) {
      best.total_cost = s;
      best.permutation = p;
    }
  } while (std::next_permutation(p.begin(), p.end()));
  return best;
}

CostMatrix random_matrix(std::size_t n, std::mt19937_64& rng, bool integer) {
  CostMatrix c(n, n);
  std::uniform_real_distribution<double> u(0.0, 10.0);
  for (auto& v : c.values) v = integer ? std::floor(u(rng) / 3.0) : u(rng);
  return c;
}

}  // namespace

TEST(Hungarian, WorkedExamples) {
  auto a = matching::hungarian(CostMatrix::from_rows({{0, 1}, {1, 0}}));
  EXPECT_EQ(a.permutation, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(a.total_cost, 0.0);
  a = matching::hungarian(CostMatrix::from_rows({{1, 2}, {3, 1}}));
  EXPECT_EQ(a.permutation, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(a.total_cost, 2.0);
  a = matching::hungarian(CostMatrix::from_rows({{4, 1, 3}, {2, 0, 5}, {3, 2, 2}}));
  EXPECT_EQ(a.permutation, (std::vector<std::size_t>{1, 0, 2}));
  EXPECT_EQ(a.total_cost, 5.0);
}

TEST(Hungarian, MatchesBruteForce) {
  std::mt19937_64 rng(1);
  for (std::size_t n = 1; n <= 7; ++n)
    for (int trial = 0; trial < 40; ++trial) {
      const auto c = random_matrix(n, rng, false);
      const auto a = matching::hungarian(c), b = brute_force(c);
      EXPECT_NEAR(a.total_cost, b.total_cost, 1e-9);
      EXPECT_EQ(a.permutation, b.permutation);
    }
}

TEST(Hungarian, TiesResolveToLexicographicallySmallest) {
  std::mt19937_64 rng(2);
  for (std::size_t n = 2; n <= 6; ++n)
    for (int trial = 0; trial < 50; ++trial) {
      const auto c = random_matrix(n, rng, true);
      const auto a = matching::hungarian(c), b = brute_force(c);
      EXPECT_EQ(a.total_cost, b.total_cost);
      EXPECT_EQ(a.permutation, b.permutation);
    }
  const auto a = matching::hungarian(CostMatrix(4, 4, 1.0));
  EXPECT_EQ(a.permutation, (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(Hungarian, IsBijectiveAndCostIsSumOfMatchedEntries) {
  std::mt19937_64 rng(3);
  const auto c = random_matrix(12, rng, false);
  const auto a = matching::hungarian(c);
  auto sorted = a.permutation;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) EXPECT_EQ(sorted[i], i);
  double s = 0.0;
  for (std::size_t i = 0; i < 12; ++i) s += c.at(i, a.permutation[i]);
  EXPECT_EQ(s, a.total_cost);
}

TEST(Hungarian, Errors) {
  EXPECT_THROW(matching::hungarian(CostMatrix(2, 3)), InvalidArgument);
  auto c = CostMatrix(2, 2);
  c.at(0, 1) = std::nan("");
  EXPECT_THROW(matching::hungarian(c), InvalidArgument);
  c.at(0, 1) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(matching::hungarian(c), InvalidArgument);
  EXPECT_TRUE(matching::hungarian(CostMatrix(0, 0)).permutation.empty());
}

TEST(MatchByScore, MaximizeDominantDiagonal) {
  const auto a = matching::match_scores(CostMatrix::from_rows({{10, -5}, {-5, 10}}), matching::Objective::Maximize);
  EXPECT_EQ(a.permutation, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(a.total_cost, 20.0);
}

TEST(MatchByScore, MaximizeEqualsMinimizeOfNegation) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    auto s = random_matrix(4, rng, false);
    auto neg = s;
    for (auto& v : neg.values) v = -v;
    const auto a = matching::match_scores(s, matching::Objective::Maximize);
    const auto b = matching::match_scores(neg, matching::Objective::Minimize);
    EXPECT_EQ(a.permutation, b.permutation);
    EXPECT_NEAR(a.total_cost, -b.total_cost, 1e-12);
    // Agrees with enumeration of all 24 permutations.
    EXPECT_EQ(a.permutation, brute_force(neg).permutation);
  }
}

TEST(MatchByScore, UsesTargetEstimateOrientation) {
  const std::vector<int> targets{1, 2, 3};
  const std::vector<int> estimates{3, 1, 2};
  const auto a = matching::match_by_score<int>(
      targets, estimates, [](int t, int e) { return -std::abs(t - e); }, matching::Objective::Maximize);
  EXPECT_EQ(a.permutation, (std::vector<std::size_t>{2, 0, 1}));
  EXPECT_THROW(matching::match_by_score<int>(
                   targets, {1, 2}, [](int, int) { return 0.0; }, matching::Objective::Maximize),
               InvalidArgument);
}

TEST(PitLoss, WorkedExamples) {
  ad::Tape<double> t;
  const Tensor<double> targets({2, 1}, {0.0, 1.0});
  auto r = matching::pit_mse_loss(t.variable(Tensor<double>({2, 1}, {2.0, 0.0})), targets);
  EXPECT_DOUBLE_EQ(r.loss.value().item(), 0.5);
  EXPECT_EQ(r.assignment.permutation, (std::vector<std::size_t>{1, 0}));

  r = matching::pit_mse_loss(t.variable(targets), targets);
  EXPECT_EQ(r.loss.value().item(), 0.0);
  EXPECT_EQ(r.assignment.permutation, (std::vector<std::size_t>{0, 1}));

  r = matching::pit_mse_loss(t.variable(Tensor<double>({2, 1}, {1.0, 0.0})), targets);
  EXPECT_EQ(r.loss.value().item(), 0.0);
  EXPECT_EQ(r.assignment.permutation, (std::vector<std::size_t>{1, 0}));
}

TEST(PitLoss, InvariantUnderTargetPermutations) {
  std::mt19937_64 rng(5);
  const auto preds = audioslots::testing::random_tensor({4, 3, 5}, rng);
  const auto targets = audioslots::testing::random_tensor({4, 3, 5}, rng);
  ad::Tape<double> t0;
  const double base = matching::pit_mse_loss(t0.variable(preds), targets).loss.value().item();
  std::vector<std::size_t> p{0, 1, 2, 3};
  do {
    Tensor<double> permuted(targets.shape);
    for (std::size_t i = 0; i < 4; ++i)
      std::copy_n(targets.data.begin() + long(p[i] * 15), 15, permuted.data.begin() + long(i * 15));
    ad::Tape<double> t;
    EXPECT_EQ(matching::pit_mse_loss(t.variable(preds), permuted).loss.value().item(), base);
  } while (std::next_permutation(p.begin(), p.end()));
}

TEST(PitLoss, GradientTreatsAssignmentAsConstant) {
  ad::Tape<double> t;
  auto p = t.variable(Tensor<double>({2, 1}, {2.0, 0.0}));
  const auto r = matching::pit_mse_loss(p, Tensor<double>({2, 1}, {0.0, 1.0}));
  t.backward(r.loss);
  // loss = ((2-1)^2 + (0-0)^2) / 2
  EXPECT_EQ(t.grad(p).data, (std::vector<double>{1.0, 0.0}));
}

TEST(PitLoss, Errors) {
  ad::Tape<double> t;
  auto p = t.variable(Tensor<double>({2, 3}));
  EXPECT_THROW(matching::pit_mse_loss(p, Tensor<double>({3, 3})), ShapeError);
  EXPECT_THROW(matching::pit_mse_loss(p, Tensor<double>({2, 4})), ShapeError);
}
