#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "gpdd/linalg.hpp"

using namespace gpdd;

namespace {

// Independent determinant via cofactor expansion, for log_det cross-checks.
double cofactor_det(const Mat& a) {
  const Eigen::Index n = a.rows();
  if (n == 1) return a(0, 0);
  double det = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    Mat minor(n - 1, n - 1);
    for (Eigen::Index r = 1; r < n; ++r) {
      Eigen::Index cc = 0;
      for (Eigen::Index c = 0; c < n; ++c) {
        if (c == j) continue;
        minor(r - 1, cc++) = a(r, c);
      }
    }
    det += (j % 2 == 0 ? 1.0 : -1.0) * a(0, j) * cofactor_det(minor);
  }
  return det;
}

}  // namespace

TEST_CASE("cholesky of a hand-factorable matrix") {
  Mat a(2, 2);
  a << 4, 2, 2, 5;
  CholeskyFactor f = cholesky_with_jitter(a);
  // first-attempt jitter is 1e-8 * mean diagonal = 4.5e-8
  CHECK(f.jitter_used == Catch::Approx(4.5e-8).epsilon(1e-12));
  CHECK(f.lower(0, 0) == Catch::Approx(2.0).epsilon(1e-7));
  CHECK(f.lower(1, 0) == Catch::Approx(1.0).epsilon(1e-7));
  CHECK(f.lower(1, 1) == Catch::Approx(2.0).epsilon(1e-7));
  CHECK(f.lower(0, 1) == 0.0);
}

TEST_CASE("cholesky jitter floor on the zero matrix") {
  Mat a = Mat::Zero(2, 2);
  CholeskyFactor f = cholesky_with_jitter(a, 1e-8);
  // zero diagonal mean falls back to absolute scale 1: first jitter 1e-8
  CHECK(f.jitter_used == Catch::Approx(1e-8).epsilon(1e-12));
  CHECK(f.lower(0, 0) == Catch::Approx(std::sqrt(1e-8)).epsilon(1e-10));
  CHECK(f.lower(1, 1) == Catch::Approx(std::sqrt(1e-8)).epsilon(1e-10));
  CHECK(f.lower(1, 0) == 0.0);
}

TEST_CASE("indefinite matrix exhausts the jitter schedule") {
  Mat a(2, 2);
  a << 1, 2, 2, 1;  // eigenvalues 3, -1
  CHECK_THROWS_AS(cholesky_with_jitter(a, 1e-8), NotPositiveDefinite);
}

TEST_CASE("non-finite input is rejected") {
  Mat a(2, 2);
  a << 1, 0, 0, std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(cholesky_with_jitter(a), NotPositiveDefinite);
}

TEST_CASE("jitter escalates until the factorization succeeds") {
  // Slightly indefinite: eigenvalues 1 +/- (1 + 4e-7).
  Mat a(2, 2);
  a << 1.0, 1.0 + 4e-7, 1.0 + 4e-7, 1.0;
  CholeskyFactor f = cholesky_with_jitter(a, 1e-8);
  CHECK(f.jitter_used > 1e-8);
  Mat rec = f.lower * f.lower.transpose();
  CHECK((rec - a).norm() <= 1e-5);
}

TEST_CASE("log_det matches a cofactor-expansion determinant") {
  Rng rng(7);
  std::normal_distribution<double> nd;
  Mat b(5, 5);
  for (Eigen::Index i = 0; i < 5; ++i)
    for (Eigen::Index j = 0; j < 5; ++j) b(i, j) = nd(rng);
  Mat a = b * b.transpose() + 0.5 * Mat::Identity(5, 5);
  CholeskyFactor f = cholesky_with_jitter(a);
  // The factor is of a + jitter_used*I by contract; the oracle must match.
  Mat a_jit = a + f.jitter_used * Mat::Identity(5, 5);
  const double expected = std::log(cofactor_det(a_jit));
  CHECK(log_det(f) == Catch::Approx(expected).epsilon(1e-10));
}

TEST_CASE("triangular solves invert the factor") {
  Rng rng(11);
  std::normal_distribution<double> nd;
  Mat b(4, 4);
  for (Eigen::Index i = 0; i < 4; ++i)
    for (Eigen::Index j = 0; j < 4; ++j) b(i, j) = nd(rng);
  Mat a = b * b.transpose() + Mat::Identity(4, 4);
  CholeskyFactor f = cholesky_with_jitter(a);
  Mat rhs(4, 2);
  for (Eigen::Index i = 0; i < 4; ++i)
    for (Eigen::Index j = 0; j < 2; ++j) rhs(i, j) = nd(rng);

  Mat x = solve_triangular(f, rhs);
  CHECK((f.lower * x - rhs).norm() <= 1e-12);
  Mat xt = solve_triangular(f, rhs, /*transpose=*/true);
  CHECK((f.lower.transpose() * xt - rhs).norm() <= 1e-12);

  // Full solve through the two half-solves inverts the jittered matrix the
  // factor was actually taken of.
  Mat a_jit = a + f.jitter_used * Mat::Identity(4, 4);
  Mat full = solve_triangular(f, solve_triangular(f, rhs), /*transpose=*/true);
  CHECK((a_jit * full - rhs).norm() <= 1e-10);
}

TEST_CASE("shape errors are reported") {
  Mat a(2, 3);
  a.setOnes();
  CHECK_THROWS_AS(cholesky_with_jitter(a), DimensionMismatch);
  Mat spd = Mat::Identity(3, 3);
  CholeskyFactor f = cholesky_with_jitter(spd);
  CHECK_THROWS_AS(solve_triangular(f, Mat::Ones(2, 1)), DimensionMismatch);
}
