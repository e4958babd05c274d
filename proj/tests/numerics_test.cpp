#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "condcl/numerics.hpp"

namespace condcl {
namespace {

TEST(RowNormalize, KnownRows) {
  const Matrix m{{3, 4}, {1, 0}, {2, 2}};
  const Matrix u = row_normalize(m);
  EXPECT_DOUBLE_EQ(u(0, 0), 0.6);
  EXPECT_DOUBLE_EQ(u(0, 1), 0.8);
  EXPECT_EQ(u(1, 0), 1.0);
  EXPECT_EQ(u(1, 1), 0.0);
  const Matrix c = row_normalize(Matrix{{7.5, 7.5, 7.5, 7.5}});
  for (double v : c.values()) EXPECT_NEAR(v, 0.5, 1e-15);
}

TEST(RowNormalize, ZeroRowThrows) {
  EXPECT_THROW(row_normalize(Matrix{{1, 2}, {0, 0}}), ZeroRowError);
  EXPECT_THROW(row_normalize(Matrix{{1e-31, 0}}), ZeroRowError);
}

TEST(RowNormalize, IdempotentProperty) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix m = random_normal(1 + rng.below(20), 1 + rng.below(40), rng);
    const Matrix once = row_normalize(m);
    const Matrix twice = row_normalize(once);
    EXPECT_LE(max_abs_diff(once, twice), 1e-15);
    for (std::size_t i = 0; i < once.rows(); ++i) EXPECT_NEAR(norm(once.row(i)), 1.0, 1e-12);
  }
}

TEST(Logsumexp, Examples) {
  EXPECT_NEAR(logsumexp(std::vector<double>{0, 0}), std::log(2.0), 1e-15);
  EXPECT_EQ(logsumexp(std::vector<double>{-3.25}), -3.25);
  EXPECT_NEAR(logsumexp(std::vector<double>{1000, 1000}), 1000 + std::log(2.0), 1e-12);
  EXPECT_THROW(logsumexp(std::vector<double>{}), EmptyInputError);
}

TEST(Logsumexp, ShiftProperty) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> v(1 + rng.below(30));
    for (double& x : v) x = rng.uniform(-20, 20);
    const double c = rng.uniform(-50, 50);
    std::vector<double> shifted = v;
    for (double& x : shifted) x += c;
    EXPECT_NEAR(logsumexp(shifted), logsumexp(v) + c, 1e-12);
  }
}

TEST(PairwiseDot, Examples) {
  const Matrix e{{1, 0}, {0, 1}};
  EXPECT_EQ(pairwise_dot(e, e), (Matrix{{1, 0}, {0, 1}}));
  EXPECT_EQ(pairwise_dot(Matrix{{1, 2}}, Matrix{{3, 4}}), (Matrix{{11}}));
  EXPECT_THROW(pairwise_dot(Matrix{{1, 2}}, Matrix{{1, 2, 3}}), ShapeMismatchError);
}

TEST(PairwiseDot, UnitRowsBounded) {
  Rng rng(3);
  const Matrix a = random_sphere(40, 16, rng);
  const Matrix b = random_sphere(30, 16, rng);
  const Matrix g = pairwise_dot(a, b);
  for (double v : g.values()) {
    EXPECT_GE(v, -1 - 1e-12);
    EXPECT_LE(v, 1 + 1e-12);
  }
  const Matrix self = pairwise_dot(a, a);
  for (std::size_t i = 0; i < a.rows(); ++i) EXPECT_NEAR(self(i, i), 1.0, 1e-12);
}

TEST(MatrixTest, RejectsNonFinite) {
  EXPECT_THROW(Matrix(1, 2, {1.0, std::nan("")}), NonFiniteError);
  EXPECT_THROW(Matrix(1, 2, {1.0, 2.0, 3.0}), ShapeMismatchError);
}

TEST(MatrixTest, ProductsAgree) {
  Rng rng(9);
  const Matrix a = random_normal(5, 7, rng);
  const Matrix b = random_normal(7, 3, rng);
  const Matrix ab = matmul(a, b);
  EXPECT_LE(max_abs_diff(ab, pairwise_dot(a, transpose(b))), 1e-13);
  EXPECT_LE(max_abs_diff(matmul_tn(transpose(a), b), ab), 1e-13);
}

TEST(RngTest, SameSeedSameStream) {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 1000; ++i) {
    const auto x = a();
    EXPECT_EQ(x, b());
    differs |= x != c();
  }
  EXPECT_TRUE(differs);
}

TEST(RngTest, SplitStreamsReproducibleAndDistinct) {
  const Rng root(7);
  Rng s1 = root.split(1), s1b = root.split(1), s2 = root.split(2);
  int equal = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto x = s1();
    EXPECT_EQ(x, s1b());
    equal += x == s2() ? 1 : 0;
  }
  EXPECT_EQ(equal, 0);
  // split does not advance the parent
  EXPECT_EQ(root.counter(), 0u);
}

TEST(RngTest, RestoreContinuesStream) {
  Rng a(99);
  for (int i = 0; i < 17; ++i) a();
  Rng b = Rng::restore(a.seed(), a.key(), a.counter());
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a(), b());
}

TEST(RngTest, MomentsOfUniformAndNormal) {
  Rng rng(1);
  const int n = 200000;
  double su = 0, sn = 0, sn2 = 0;
  for (int i = 0; i < n; ++i) {
    su += rng.uniform();
    const double z = rng.normal();
    sn += z;
    sn2 += z * z;
  }
  EXPECT_NEAR(su / n, 0.5, 0.005);
  EXPECT_NEAR(sn / n, 0.0, 0.01);
  EXPECT_NEAR(sn2 / n, 1.0, 0.015);
}

TEST(RngTest, BelowIsInRangeAndCoversIt) {
  Rng rng(2);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 7000; ++i) ++counts[rng.below(7)];
  for (int c : counts) EXPECT_GT(c, 850);
  EXPECT_THROW(rng.below(0), InvalidArgument);
}

}  // namespace
}  // namespace condcl
