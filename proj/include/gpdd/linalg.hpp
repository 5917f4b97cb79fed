// Safeguarded Cholesky factorization and triangular solves over dense
// row-major doubles; the substrate for every kernel and ELBO computation.
#pragma once

#include <cmath>
#include <string>

#include "gpdd/common.hpp"
#include "gpdd/errors.hpp"

namespace gpdd {

struct CholeskyFactor {
  Mat lower;           // lower-triangular, strictly positive diagonal
  double jitter_used;  // amount added to the diagonal before factorization
};

// Factorizes A + jitter*I with jitter escalating x10 from base_jitter (scaled
// by the mean diagonal) at most 5 attempts. base_jitter < 0 selects the
// default 1e-8.
inline CholeskyFactor cholesky_with_jitter(const Mat& A, double base_jitter = -1.0) {
  if (A.rows() != A.cols()) {
    throw DimensionMismatch("cholesky needs a square matrix, got " + std::to_string(A.rows()) +
                            "x" + std::to_string(A.cols()));
  }
  if (base_jitter < 0.0) base_jitter = 1e-8;
  const double mean_diag = A.rows() > 0 ? A.diagonal().mean() : 0.0;
  const double scale = mean_diag > 0.0 ? mean_diag : 1.0;
  double jitter = base_jitter * scale;
  for (int attempt = 0; attempt < 5; ++attempt, jitter *= 10.0) {
    Mat C = A;
    C.diagonal().array() += jitter;
    Eigen::LLT<Mat> llt(C);
    if (llt.info() == Eigen::Success) {
      CholeskyFactor f;
      f.lower = llt.matrixL();
      f.jitter_used = jitter;
      // LLT can report success on barely-indefinite inputs; require a
      // strictly positive diagonal before accepting the factor.
      if ((f.lower.diagonal().array() > 0.0).all() && f.lower.allFinite()) return f;
    }
  }
  throw NotPositiveDefinite("jitter escalation exhausted after 5 attempts, last jitter " +
                            std::to_string(jitter / 10.0));
}

// Solves L*X = B (or L^T*X = B when transpose) with L the factor's lower
// triangle.
inline Mat solve_triangular(const CholeskyFactor& L, const Mat& B, bool transpose = false) {
  if (L.lower.rows() != B.rows()) {
    throw DimensionMismatch("triangular solve: L is " + std::to_string(L.lower.rows()) + "x" +
                            std::to_string(L.lower.cols()) + ", B has " +
                            std::to_string(B.rows()) + " rows");
  }
  if (transpose) return L.lower.transpose().triangularView<Eigen::Upper>().solve(B);
  return L.lower.triangularView<Eigen::Lower>().solve(B);
}

// log|A + jitter*I| from its Cholesky factor.
inline double log_det(const CholeskyFactor& L) {
  return 2.0 * L.lower.diagonal().array().log().sum();
}

}  // namespace gpdd
