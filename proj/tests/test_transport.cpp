#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "ftrj/rng.hpp"
#include "ftrj/transport.hpp"

using namespace ftrj;

namespace {

DenseMatrix random_points(Rng& rng, Eigen::Index n, Eigen::Index d, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  DenseMatrix x(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = g(rng);
  return x;
}

DenseMatrix line(std::initializer_list<double> xs) {
  DenseMatrix m(static_cast<Eigen::Index>(xs.size()), 1);
  Eigen::Index i = 0;
  for (double x : xs) m(i++, 0) = x;
  return m;
}

double brute_force_min(const CostMatrix& c) {
  std::vector<std::size_t> perm(static_cast<std::size_t>(c.rows()));
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0;
    for (std::size_t i = 0; i < perm.size(); ++i) s += c(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(perm[i]));
    best = std::min(best, s);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

double assignment_total(const CostMatrix& c, const std::vector<std::size_t>& a) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += c(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(a[i]));
  return s;
}

}  // namespace

TEST(BuildCost, SquaredEuclideanOnTwoPoints) {
  auto c = build_cost(line({0, 1}), line({0, 1}), [](const Vector& x, const Vector& y) { return (x - y).squaredNorm(); });
  DenseMatrix expected(2, 2);
  expected << 0, 1, 1, 0;
  EXPECT_EQ(c, expected);
}

TEST(BuildCost, AsymmetricReluCost) {
  auto c = build_cost(line({0, 1}), line({0, 1}), [](const Vector& x, const Vector& y) { return std::max(0.0, y[0] - x[0]); });
  DenseMatrix expected(2, 2);
  expected << 0, 1, 0, 0;
  EXPECT_EQ(c, expected);
}

TEST(BuildCost, RejectsEmptyAndNonFinite) {
  auto nan_cost = [](const Vector&, const Vector&) { return std::nan(""); };
  EXPECT_THROW(build_cost(DenseMatrix(0, 1), line({1}), nan_cost), Error);
  EXPECT_THROW(build_cost(line({0}), line({1}), nan_cost), Error);
}

TEST(Assignment, IdentityFavoringCost) {
  CostMatrix c = DenseMatrix::Ones(3, 3) - DenseMatrix::Identity(3, 3);
  auto a = solve_assignment(c);
  EXPECT_EQ(a, (std::vector<std::size_t>{0, 1, 2}));
}

TEST(Assignment, AllEqualCostsBreakTiesToIdentity) {
  for (Eigen::Index n : {1, 2, 5, 9}) {
    auto a = solve_assignment(DenseMatrix::Constant(n, n, 0.7));
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], i);
  }
}

TEST(Assignment, MatchesBruteForce) {
  Rng rng(1);
  std::uniform_real_distribution<double> u(0.0, 10.0);
  std::uniform_int_distribution<int> size(1, 6);
  for (int trial = 0; trial < 200; ++trial) {
    const Eigen::Index n = size(rng);
    CostMatrix c(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j) c(i, j) = trial % 4 == 0 ? std::floor(u(rng) / 3) : u(rng);
    auto a = solve_assignment(c);
    std::vector<std::size_t> sorted = a;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) ASSERT_EQ(sorted[i], i);
    EXPECT_NEAR(assignment_total(c, a), brute_force_min(c), 1e-9);
    // constant shift leaves the optimum unchanged
    auto shifted = solve_assignment((c.array() + 3.25).matrix());
    EXPECT_NEAR(assignment_total(c, shifted), brute_force_min(c), 1e-9);
  }
}

TEST(Coupling, SquareIsUniformPermutation) {
  Rng rng(2);
  auto x = random_points(rng, 20, 2), y = random_points(rng, 20, 2);
  auto cpl = ot_coupling(euclidean_cost(x, y));
  ASSERT_EQ(cpl.plan.size(), 20u);
  std::vector<double> col(20, 0.0), row(20, 0.0);
  for (const auto& e : cpl.plan) {
    row[e.source] += e.weight;
    col[e.target] += e.weight;
  }
  for (int i = 0; i < 20; ++i) {
    EXPECT_EQ(row[i], 1.0 / 20);
    EXPECT_EQ(col[i], 1.0 / 20);
  }
}

TEST(Coupling, RectangularSinkhornMarginals) {
  Rng rng(3);
  auto x = random_points(rng, 7, 2), y = random_points(rng, 11, 2);
  CostMatrix c = euclidean_cost(x, y);
  auto cpl = ot_coupling(c);
  std::vector<double> row(7, 0.0), col(11, 0.0);
  double total = 0;
  for (const auto& e : cpl.plan) {
    EXPECT_GE(e.weight, 0.0);
    row[e.source] += e.weight;
    col[e.target] += e.weight;
    total += e.weight;
  }
  EXPECT_NEAR(total, 1.0, 1e-12);
  for (double r : row) EXPECT_NEAR(r, 1.0 / 7, 1e-9);
  for (double s : col) EXPECT_NEAR(s, 1.0 / 11, 1e-9);
  EXPECT_LE(cpl.marginal_error, 1e-9);
  // the entropic plan can only cost more than the exact optimum
  EXPECT_GE(cpl.cost(c), wasserstein1(x, y) - 1e-12);
}

TEST(W1, TrivialValues) {
  Rng rng(4);
  auto x = random_points(rng, 10, 3);
  EXPECT_EQ(wasserstein1(x, x), 0.0);
  EXPECT_EQ(wasserstein1(line({0}), line({3})), 3.0);
  EXPECT_THROW(wasserstein1(x, random_points(rng, 10, 2)), Error);
  EXPECT_THROW(wasserstein1(DenseMatrix(0, 3), x), Error);
}

TEST(W1, FivePointBruteForce) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = random_points(rng, 5, 2), b = random_points(rng, 5, 2);
    CostMatrix c(5, 5);
    for (Eigen::Index i = 0; i < 5; ++i)
      for (Eigen::Index j = 0; j < 5; ++j) c(i, j) = (a.row(i) - b.row(j)).norm();
    EXPECT_NEAR(wasserstein1(a, b), brute_force_min(c) / 5, 1e-12);
  }
}

// Unequal sizes: replicated sets brute-forced over all permutations.
TEST(W1, UnequalSizesExact) {
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    auto a = random_points(rng, 2, 2), b = random_points(rng, 3, 2);
    CostMatrix c(6, 6);
    for (Eigen::Index i = 0; i < 6; ++i)
      for (Eigen::Index j = 0; j < 6; ++j) c(i, j) = (a.row(i % 2) - b.row(j % 3)).norm();
    EXPECT_NEAR(wasserstein1(a, b), brute_force_min(c) / 6, 1e-12);
  }
}

TEST(W1, SymmetryAndTriangle) {
  Rng rng(7);
  for (int trial = 0; trial < 30; ++trial) {
    auto a = random_points(rng, 8, 2), b = random_points(rng, 8, 2), c = random_points(rng, 8, 2);
    b.col(0).array() += 1.0;
    const double ab = wasserstein1(a, b), ba = wasserstein1(b, a);
    EXPECT_NEAR(ab, ba, 1e-12);
    EXPECT_LE(ab, wasserstein1(a, c) + wasserstein1(c, b) + 1e-9);
  }
}

TEST(W1, TranslationGivesShift) {
  Rng rng(8);
  auto a = random_points(rng, 30, 2, 0.1);
  DenseMatrix b = a;
  b.col(0).array() += 1.0;
  EXPECT_NEAR(wasserstein1(b, a), 1.0, 1e-12);
}

// The debiased entropic estimate is approximate; check it lands near the
// exact value on a case small enough to solve both ways.
TEST(W1, DebiasedSinkhornNearExact) {
  Rng rng(9);
  auto a = random_points(rng, 37, 2), b = random_points(rng, 41, 2);
  b.col(0).array() += 2.0;
  const double exact = wasserstein1(a, b);
  W1Options approx;
  approx.max_exact_size = 0;
  const double est = wasserstein1(a, b, approx);
  EXPECT_NEAR(est, exact, 0.1 * exact);
}

TEST(EvaluateMarginals, Examples) {
  Rng rng(10);
  auto x = random_points(rng, 12, 2);
  DenseMatrix shifted = x;
  shifted.col(0).array() += 1.0;
  auto same = evaluate_marginals({{0.5, x}}, {{0.5, x}});
  EXPECT_EQ(same.per_t.at(0.5), 0.0);
  auto one = evaluate_marginals({{0.5, shifted}}, {{0.5, x}});
  EXPECT_NEAR(one.mean, 1.0, 1e-12);
  std::map<double, DenseMatrix> sim, truth;
  for (int k = 1; k <= 3; ++k) {
    truth[k] = line({0.0});
    sim[k] = line({static_cast<double>(k)});
  }
  auto three = evaluate_marginals(sim, truth);
  EXPECT_EQ(three.mean, 2.0);
  EXPECT_THROW(evaluate_marginals({{0.1, x}}, {{0.5, x}}), Error);
}
