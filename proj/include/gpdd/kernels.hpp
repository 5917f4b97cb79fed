// ARD squared-exponential kernel: closed-form value/gradient/Hessian blocks,
// directional-derivative blocks, and vectorized assembly of the augmented
// kernel matrices over inducing values and directional derivatives.
//
// Augmented-matrix ordering convention (fixed across the library): a side
// with M points and p directions per point has M(p+1) rows laid out as
// [all M values | directional derivatives, point-major], i.e. row
// M + i*p + q is direction q of point i.
#pragma once

#include <string>
#include <vector>

#include "gpdd/common.hpp"
#include "gpdd/errors.hpp"

namespace gpdd {

struct RbfParams {
  Vec ell;              // ARD lengthscales, one per input dimension, > 0
  double sf2 = 1.0;     // output scale sigma_f^2, > 0
  double mu0 = 0.0;     // constant prior mean
  double noise_y = 0.1; // label noise variance sigma_y^2, > 0
  double noise_g = 0.1; // gradient noise variance sigma_g^2, shared across coords, > 0

  int dim() const { return static_cast<int>(ell.size()); }
  void validate() const {
    if (ell.size() == 0 || !(ell.array() > 0.0).all() || !ell.allFinite()) {
      throw InvalidConfig("lengthscales must be positive and finite");
    }
    if (!(sf2 > 0.0) || !(noise_y > 0.0) || !(noise_g > 0.0) || !std::isfinite(mu0)) {
      throw InvalidConfig("scales and noises must be positive and finite");
    }
  }
};

// p unit directions per inducing point, stored point-major as an (M*p) x D
// matrix: row i*p + q is direction q of point i.
struct DirectionSet {
  int M = 0;
  int p = 0;
  Mat V;  // (M*p) x D

  void validate(int D) const {
    if (p < 0 || M < 0) throw InvalidConfig("direction set sizes must be nonnegative");
    if (V.rows() != static_cast<Eigen::Index>(M) * p || (p > 0 && V.cols() != D)) {
      throw DimensionMismatch("direction set is " + std::to_string(V.rows()) + "x" +
                              std::to_string(V.cols()) + ", expected " + std::to_string(M * p) +
                              "x" + std::to_string(D));
    }
  }
};

enum class Wrt { First, Second };

namespace detail {
inline void check_pair(const Vec& x, const Vec& x2, const RbfParams& th) {
  if (x.size() != x2.size() || x.size() != th.ell.size()) {
    throw DimensionMismatch("kernel arguments of size " + std::to_string(x.size()) + ", " +
                            std::to_string(x2.size()) + " vs " + std::to_string(th.ell.size()) +
                            " lengthscales");
  }
}
}  // namespace detail

inline double k(const Vec& x, const Vec& x2, const RbfParams& th) {
  detail::check_pair(x, x2, th);
  const double s = ((x - x2).array() / th.ell.array()).square().sum();
  return th.sf2 * std::exp(-0.5 * s);
}

// First-order derivative of k in its first (or second) argument:
// grad_x k = -k * (x - x2) / ell^2 elementwise; negated for Second.
inline Vec grad_k(const Vec& x, const Vec& x2, const RbfParams& th, Wrt wrt) {
  const double kv = k(x, x2, th);
  Vec u = (x - x2).array() / th.ell.array().square();
  return (wrt == Wrt::First ? -kv : kv) * u;
}

// Mixed second derivative d^2 k / dx dx2 = k * (diag(1/ell^2) - u u^T) with
// u = (x - x2) / ell^2.
inline Mat hess_k(const Vec& x, const Vec& x2, const RbfParams& th) {
  const double kv = k(x, x2, th);
  const Vec u = (x - x2).array() / th.ell.array().square();
  Mat H = -kv * (u * u.transpose());
  H.diagonal().array() += kv / th.ell.array().square();
  return H;
}

// (D+1)x(D+1) block [[k, (grad_{x2} k)^T], [grad_x k, hess]] covering the
// value and all partial derivatives at a pair of points.
inline Mat k_nabla_block(const Vec& x, const Vec& x2, const RbfParams& th) {
  const Eigen::Index D = x.size();
  Mat blk(D + 1, D + 1);
  blk(0, 0) = k(x, x2, th);
  blk.block(0, 1, 1, D) = grad_k(x, x2, th, Wrt::Second).transpose();
  blk.block(1, 0, D, 1) = grad_k(x, x2, th, Wrt::First);
  blk.block(1, 1, D, D) = hess_k(x, x2, th);
  return blk;
}

// 2x2 block [[k, (grad_{z2} k)^T v2], [v1^T grad_{z1} k, v1^T H v2]] computed
// from O(D) inner products; the D x D Hessian is never formed.
inline Mat k_dir_block(const Vec& z1, const Vec& v1, const Vec& z2, const Vec& v2,
                       const RbfParams& th) {
  detail::check_pair(z1, z2, th);
  if (v1.size() != z1.size() || v2.size() != z2.size()) {
    throw DimensionMismatch("direction sizes " + std::to_string(v1.size()) + ", " +
                            std::to_string(v2.size()));
  }
  const double kv = k(z1, z2, th);
  const Vec d = z1 - z2;
  const auto il2 = th.ell.array().square().inverse();
  const double ta = (v1.array() * d.array() * il2).sum();
  const double tb = (v2.array() * d.array() * il2).sum();
  const double pm = (v1.array() * v2.array() * il2).sum();
  Mat blk(2, 2);
  blk(0, 0) = kv;
  blk(0, 1) = kv * tb;
  blk(1, 0) = -kv * ta;
  blk(1, 1) = kv * (pm - ta * tb);
  return blk;
}

// One side of an augmented Gram matrix: n rows, each a point with an optional
// direction (zero direction + is_value flag marks a plain value row).
struct GramSide {
  Mat pts;      // n x D
  Mat dirs;     // n x D, zero rows for value rows
  Vec is_val;   // n, 1.0 for value rows else 0.0

  Eigen::Index rows() const { return pts.rows(); }

  // [M values | Mp directional rows, point-major] from inducing state.
  static GramSide inducing(const Mat& Z, const DirectionSet& V) {
    V.validate(static_cast<int>(Z.cols()));
    const Eigen::Index M = Z.rows(), D = Z.cols();
    const Eigen::Index R = M * (V.p + 1);
    GramSide s;
    s.pts.resize(R, D);
    s.dirs = Mat::Zero(R, D);
    s.is_val = Vec::Zero(R);
    s.pts.topRows(M) = Z;
    s.is_val.head(M).setOnes();
    for (Eigen::Index i = 0; i < M; ++i) {
      for (int q = 0; q < V.p; ++q) {
        s.pts.row(M + i * V.p + q) = Z.row(i);
        s.dirs.row(M + i * V.p + q) = V.V.row(i * V.p + q);
      }
    }
    return s;
  }
};

// Augmented Gram matrix between two sides, vectorized over all pairs. For
// rows a=(x, va) and b=(y, vb) with delta = x - y:
//   value-value    k
//   value-dir      k * tb
//   dir-value     -k * ta
//   dir-dir        k * (pm - ta*tb)
// where ta = va.delta/ell^2, tb = vb.delta/ell^2, pm = va.vb/ell^2; the zero
// direction on value rows makes a single masked expression cover all four
// cases. No D x D intermediate is formed: every term is an (nr x nc) matrix
// built from row/column inner products.
inline Mat rbf_gram(const GramSide& r, const GramSide& c, const RbfParams& th) {
  th.validate();
  const Eigen::Index D = th.ell.size();
  if (r.pts.cols() != D || c.pts.cols() != D) {
    throw DimensionMismatch("gram sides have " + std::to_string(r.pts.cols()) + "/" +
                            std::to_string(c.pts.cols()) + " columns, kernel has " +
                            std::to_string(D));
  }
  const auto iell = (1.0 / th.ell.array()).matrix().transpose();    // 1 x D
  const auto iell2 = th.ell.array().square().inverse().matrix().transpose();
  Mat Xr = r.pts.array().rowwise() * iell.array();                  // x/ell
  Mat Xc = c.pts.array().rowwise() * iell.array();
  Mat Ahat = r.dirs.array().rowwise() * iell2.array();              // va/ell^2
  Mat Bhat = c.dirs.array().rowwise() * iell2.array();
  Mat Abrv = r.dirs.array().rowwise() * iell.array();               // va/ell
  Mat Bbrv = c.dirs.array().rowwise() * iell.array();

  Vec nr = Xr.rowwise().squaredNorm();
  Vec nc = Xc.rowwise().squaredNorm();
  Mat S = (-2.0 * (Xr * Xc.transpose())).colwise() + nr;
  S.rowwise() += nc.transpose();
  Mat K = th.sf2 * (-0.5 * S.array()).exp();

  Vec ra = (Ahat.array() * r.pts.array()).rowwise().sum();          // va.x/ell^2
  Vec cb = (Bhat.array() * c.pts.array()).rowwise().sum();          // vb.y/ell^2
  Mat Ta = ((-(Ahat * c.pts.transpose())).colwise() + ra).eval();   // va.delta/ell^2
  Mat Tb = (r.pts * Bhat.transpose()).rowwise() - cb.transpose();   // vb.delta/ell^2
  Mat Pm = Abrv * Bbrv.transpose();                                 // va.vb/ell^2

  Mat F = r.is_val * c.is_val.transpose();
  F.array() += Tb.array().colwise() * r.is_val.array();
  F.array() -= Ta.array().rowwise() * c.is_val.transpose().array();
  F += Pm - Ta.cwiseProduct(Tb);
  return K.cwiseProduct(F);
}

// Gram over one side with itself, ordered per the library convention.
inline Mat assemble_Kzz_bar(const Mat& Z, const DirectionSet& V, const RbfParams& th) {
  GramSide s = GramSide::inducing(Z, V);
  Mat G = rbf_gram(s, s, th);
  // Exact symmetry despite floating-point non-associativity across the
  // vectorized products.
  return 0.5 * (G + G.transpose());
}

// Prior variance of each row of a side: sf2 for value rows, sf2*|v/ell|^2 for
// directional rows.
inline Vec gram_diag(const GramSide& s, const RbfParams& th) {
  const auto iell = (1.0 / th.ell.array()).matrix().transpose();
  Mat scaled = s.dirs.array().rowwise() * iell.array();
  return th.sf2 * (s.is_val.array() + scaled.rowwise().squaredNorm().array()).matrix();
}

}  // namespace gpdd
