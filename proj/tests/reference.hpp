// Dense, unwhitened variational reference implementations written straight
// from the textbook formulas (explicit inverses via eigendecomposition, no
// whitening, no shared code with the library's fast paths). Tests map the
// library's whitened parameters onto (m_u, S_u) and demand agreement.
#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "gpdd/kernels.hpp"

namespace refimpl {

using gpdd::Mat;
using gpdd::RbfParams;
using gpdd::Vec;

inline Mat sym_inverse(const Mat& a) {
  Eigen::SelfAdjointEigenSolver<Mat> eig(0.5 * (a + a.transpose()));
  return eig.eigenvectors() *
         eig.eigenvalues().cwiseInverse().asDiagonal() *
         eig.eigenvectors().transpose();
}

inline double sym_logdet(const Mat& a) {
  Eigen::SelfAdjointEigenSolver<Mat> eig(0.5 * (a + a.transpose()));
  return eig.eigenvalues().array().log().sum();
}

// Gram matrix over [value row | D partial rows] per point, interleaved
// point-by-point, assembled pair-at-a-time from the (D+1)x(D+1) blocks.
inline Mat nabla_gram(const Mat& X1, const Mat& X2, const RbfParams& th) {
  const Eigen::Index n1 = X1.rows(), n2 = X2.rows(), D = X1.cols();
  Mat G(n1 * (D + 1), n2 * (D + 1));
  for (Eigen::Index i = 0; i < n1; ++i) {
    for (Eigen::Index j = 0; j < n2; ++j) {
      G.block(i * (D + 1), j * (D + 1), D + 1, D + 1) =
          gpdd::k_nabla_block(X1.row(i).transpose(), X2.row(j).transpose(), th);
    }
  }
  return G;
}

// Permutation taking the interleaved nabla ordering to the library layout
// [all values | point-major derivative rows]: lib row r corresponds to
// interleaved row perm(r).
inline std::vector<Eigen::Index> nabla_to_lib_perm(Eigen::Index M, Eigen::Index D) {
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(M * (D + 1)));
  for (Eigen::Index i = 0; i < M; ++i) {
    perm[static_cast<std::size_t>(i)] = i * (D + 1);
    for (Eigen::Index d = 0; d < D; ++d) {
      perm[static_cast<std::size_t>(M + i * D + d)] = i * (D + 1) + 1 + d;
    }
  }
  return perm;
}

inline Mat permute(const Mat& a, const std::vector<Eigen::Index>& perm) {
  Mat out(a.rows(), a.cols());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    for (std::size_t j = 0; j < perm.size(); ++j) {
      out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          a(perm[i], perm[j]);
    }
  }
  return out;
}

struct DenseMoments {
  Vec mean;
  Vec var;
};

// Unwhitened posterior moments: mean = mu_x + Kxz Kzz^-1 (m_u - mu_z),
// var = kdiag - diag(Kxz Kzz^-1 Kzx) + diag(Kxz Kzz^-1 S_u Kzz^-1 Kzx).
inline DenseMoments dense_moments(const Mat& Kzz, const Mat& Kxz, const Vec& kdiag,
                                  const Vec& mu_x, const Vec& mu_z, const Vec& m_u,
                                  const Mat& S_u) {
  Mat Kinv = sym_inverse(Kzz);
  Mat A = Kxz * Kinv;  // B x R
  DenseMoments out;
  out.mean = mu_x + A * (m_u - mu_z);
  Mat C = A * Kzz * A.transpose();
  Mat Sproj = A * S_u * A.transpose();
  out.var = kdiag - C.diagonal() + Sproj.diagonal();
  return out;
}

// Unwhitened KL(N(m_u, S_u) || N(mu_z, Kzz)).
inline double dense_kl(const Mat& Kzz, const Vec& mu_z, const Vec& m_u, const Mat& S_u) {
  const Eigen::Index R = Kzz.rows();
  Mat Kinv = sym_inverse(Kzz);
  const double tr = (Kinv * S_u).trace();
  const Vec d = m_u - mu_z;
  const double quad = d.dot(Kinv * d);
  return 0.5 * (tr + quad - static_cast<double>(R) + sym_logdet(Kzz) - sym_logdet(S_u));
}

// Weighted data terms + KL, matching the decomposed objective. nu holds the
// per-row observation noise variance, w the per-row inclusion weight.
inline double dense_elbo(const Mat& Kzz, const Mat& Kxz, const Vec& kdiag, const Vec& mu_x,
                         const Vec& mu_z, const Vec& m_u, const Mat& S_u, const Vec& targets,
                         const Vec& nu, const Vec& w, bool predictive_loss) {
  DenseMoments dm = dense_moments(Kzz, Kxz, kdiag, mu_x, mu_z, m_u, S_u);
  const double l2pi = std::log(2.0 * std::numbers::pi);
  double data = 0.0;
  for (Eigen::Index i = 0; i < targets.size(); ++i) {
    const double r = targets(i) - dm.mean(i);
    const double vf = std::max(dm.var(i), 1e-10);
    double term;
    if (predictive_loss) {
      const double den = nu(i) + vf;
      term = -0.5 * (l2pi + std::log(den) + r * r / den);
    } else {
      term = -0.5 * (l2pi + std::log(nu(i))) - (r * r + vf) / (2.0 * nu(i));
    }
    data += w(i) * term;
  }
  return data - dense_kl(Kzz, mu_z, m_u, S_u);
}

}  // namespace refimpl
