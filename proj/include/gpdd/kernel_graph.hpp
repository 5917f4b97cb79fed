// Tape-recorded assembly of the augmented RBF kernel matrices. Two routes
// compute identical values: gram_generic composes ~25 elementwise/matmul
// primitives (reference route), gram_fused records a single custom node whose
// hand-derived backward touches each B x R buffer a minimal number of times
// (training route). Both avoid D x D intermediates; every term is built from
// row/column inner products.
#pragma once

#include <memory>
#include <string>

#include "gpdd/autodiff.hpp"
#include "gpdd/common.hpp"
#include "gpdd/errors.hpp"

namespace gpdd::graph {

// One side of a taped Gram matrix: points and directions as tape variables
// (value rows carry a zero direction), plus a constant value-row indicator.
struct TapedSide {
  ad::Var pts;   // n x D
  ad::Var dirs;  // n x D
  Vec is_val;    // n
};

// Inducing side [M values | Mp directional rows, point-major] built from Z
// and V variables via constant 0/1 selection matmuls so gradients flow back
// to Z and V.
inline TapedSide inducing_side(ad::Tape& t, ad::Var Z, ad::Var V, int M, int p) {
  const Eigen::Index D = t.value(Z).cols();
  const Eigen::Index R = static_cast<Eigen::Index>(M) * (p + 1);
  Mat Erep = Mat::Zero(R, M);
  Mat Esel = Mat::Zero(R, static_cast<Eigen::Index>(M) * p);
  Vec is_val = Vec::Zero(R);
  for (int i = 0; i < M; ++i) {
    Erep(i, i) = 1.0;
    is_val(i) = 1.0;
    for (int q = 0; q < p; ++q) {
      Erep(M + i * p + q, i) = 1.0;
      Esel(M + i * p + q, i * p + q) = 1.0;
    }
  }
  TapedSide s;
  s.pts = t.matmul(t.constant(std::move(Erep)), Z);
  if (p > 0) {
    s.dirs = t.matmul(t.constant(std::move(Esel)), V);
  } else {
    s.dirs = t.constant(Mat::Zero(R, D));
  }
  s.is_val = std::move(is_val);
  return s;
}

// Constant side (batch rows): everything fixed data.
inline TapedSide constant_side(ad::Tape& t, const Mat& pts, const Mat& dirs, Vec is_val) {
  return TapedSide{t.constant(pts), t.constant(dirs), std::move(is_val)};
}

// --- generic route: primitive composition --------------------------------

inline ad::Var gram_generic(ad::Tape& t, ad::Var ell, ad::Var sf2, const TapedSide& r,
                            const TapedSide& c) {
  const Eigen::Index n = t.value(r.pts).rows();
  const Eigen::Index m = t.value(c.pts).rows();
  const Eigen::Index D = t.value(ell).rows();
  if (t.value(r.pts).cols() != D || t.value(c.pts).cols() != D) {
    throw DimensionMismatch("gram sides vs lengthscale dimension");
  }
  ad::Var onesR = t.constant(Mat::Ones(n, 1));
  ad::Var onesC1 = t.constant(Mat::Ones(1, m));
  ad::Var iell = t.recip(ell);
  ad::Var iell2 = t.hadamard(iell, iell);
  auto bcast = [&](ad::Var ones_n1, ad::Var v) { return t.matmul(ones_n1, t.transpose(v)); };
  ad::Var onesCc = t.constant(Mat::Ones(m, 1));

  ad::Var Xr = t.hadamard(r.pts, bcast(onesR, iell));
  ad::Var Xc = t.hadamard(c.pts, bcast(onesCc, iell));
  ad::Var Ahat = t.hadamard(r.dirs, bcast(onesR, iell2));
  ad::Var Bhat = t.hadamard(c.dirs, bcast(onesCc, iell2));
  ad::Var Abrv = t.hadamard(r.dirs, bcast(onesR, iell));
  ad::Var Bbrv = t.hadamard(c.dirs, bcast(onesCc, iell));

  ad::Var nr = t.rowsum(t.hadamard(Xr, Xr));
  ad::Var nc = t.rowsum(t.hadamard(Xc, Xc));
  ad::Var S = t.add(t.add(t.matmul(nr, onesC1), t.matmul(onesR, t.transpose(nc))),
                    t.scale(t.matmul_nt(Xr, Xc), -2.0));
  ad::Var K = t.mul_scalar(t.exp_(t.scale(S, -0.5)), sf2);

  ad::Var ra = t.rowsum(t.hadamard(Ahat, r.pts));
  ad::Var cb = t.rowsum(t.hadamard(Bhat, c.pts));
  ad::Var Ta = t.sub(t.matmul(ra, onesC1), t.matmul_nt(Ahat, c.pts));
  ad::Var Tb = t.sub(t.matmul_nt(r.pts, Bhat), t.matmul(onesR, t.transpose(cb)));
  ad::Var Pm = t.matmul_nt(Abrv, Bbrv);

  Mat VV = r.is_val * c.is_val.transpose();
  Mat RVb = r.is_val.replicate(1, m);
  Mat CVb = c.is_val.transpose().replicate(n, 1);
  ad::Var F = t.sub(t.add(t.add(t.constant(std::move(VV)), t.hadamard(Tb, t.constant(std::move(RVb)))), Pm),
                    t.add(t.hadamard(Ta, t.constant(std::move(CVb))), t.hadamard(Ta, Tb)));
  return t.hadamard(K, F);
}

// --- fused route: one custom node -----------------------------------------

namespace detail {
struct FusedStash {
  Mat K, F, Ta, Tb;
};
}  // namespace detail

inline ad::Var gram_fused(ad::Tape& t, ad::Var ell, ad::Var sf2, const TapedSide& r,
                          const TapedSide& c) {
  const Mat& Pr = t.value(r.pts);
  const Mat& Ar = t.value(r.dirs);
  const Mat& Pc = t.value(c.pts);
  const Mat& Ac = t.value(c.dirs);
  const Vec lv = t.value(ell).col(0);
  const double sf2v = t.value(sf2)(0, 0);
  const Eigen::Index D = lv.size();
  if (Pr.cols() != D || Pc.cols() != D || Ar.rows() != Pr.rows() || Ac.rows() != Pc.rows()) {
    throw DimensionMismatch("fused gram side shapes");
  }

  const Eigen::RowVectorXd iell = lv.array().inverse().transpose();
  const Eigen::RowVectorXd iell2 = lv.array().square().inverse().transpose();
  Mat Xr = Pr.array().rowwise() * iell.array();
  Mat Xc = Pc.array().rowwise() * iell.array();
  Mat Ahat = Ar.array().rowwise() * iell2.array();
  Mat Bhat = Ac.array().rowwise() * iell2.array();
  Vec nr = Xr.rowwise().squaredNorm();
  Vec nc = Xc.rowwise().squaredNorm();
  Vec ra = (Ahat.array() * Pr.array()).rowwise().sum();
  Vec cb = (Bhat.array() * Pc.array()).rowwise().sum();

  auto stash = std::make_shared<detail::FusedStash>();
  {
    Mat S = (-2.0 * (Xr * Xc.transpose())).colwise() + nr;
    S.rowwise() += nc.transpose();
    stash->K = sf2v * (-0.5 * S.array()).exp();
  }
  stash->Ta = ((-(Ahat * Pc.transpose())).colwise() + ra).eval();
  stash->Tb = (Pr * Bhat.transpose()).rowwise() - cb.transpose();
  {
    Mat Abrv = Ar.array().rowwise() * iell.array();
    Mat Bbrv = Ac.array().rowwise() * iell.array();
    stash->F = r.is_val * c.is_val.transpose();
    stash->F.array() += stash->Tb.array().colwise() * r.is_val.array();
    stash->F.array() -= stash->Ta.array().rowwise() * c.is_val.transpose().array();
    stash->F.noalias() += Abrv * Bbrv.transpose();
    stash->F -= stash->Ta.cwiseProduct(stash->Tb);
  }
  Mat G = stash->K.cwiseProduct(stash->F);

  const int i_ell = ell.id, i_sf2 = sf2.id;
  const int i_pr = r.pts.id, i_ar = r.dirs.id, i_pc = c.pts.id, i_ac = c.dirs.id;
  const Vec rv = r.is_val, cv = c.is_val;
  const bool req = t.requires_grad(ell) || t.requires_grad(sf2) || t.requires_grad(r.pts) ||
                   t.requires_grad(r.dirs) || t.requires_grad(c.pts) || t.requires_grad(c.dirs);

  return t.raw_node(
      std::move(G), req,
      [stash, i_ell, i_sf2, i_pr, i_ar, i_pc, i_ac, rv, cv, iell, iell2, sf2v,
       D](ad::Tape& tp, int self) {
        const Mat& Gbar = tp.grad_ref(self);
        const Mat& K = stash->K;
        const Mat& F = stash->F;
        const Mat& Ta = stash->Ta;
        const Mat& Tb = stash->Tb;
        const Mat& Pr = tp.value_at(i_pr);
        const Mat& Ar = tp.value_at(i_ar);
        const Mat& Pc = tp.value_at(i_pc);
        const Mat& Ac = tp.value_at(i_ac);

        Mat Kbar = Gbar.cwiseProduct(F);
        Mat Fbar = Gbar.cwiseProduct(K);
        if (tp.rg(i_sf2)) tp.grad_ref(i_sf2)(0, 0) += Kbar.cwiseProduct(K).sum() / sf2v;

        Mat Sbar = -0.5 * Kbar.cwiseProduct(K);
        Mat TAbar = -Fbar.cwiseProduct(Tb);
        TAbar.array() -= Fbar.array().rowwise() * cv.transpose().array();
        Mat TBbar = -Fbar.cwiseProduct(Ta);
        TBbar.array() += Fbar.array().colwise() * rv.array();
        // PM adjoint is Fbar itself.

        Mat Xr = Pr.array().rowwise() * iell.array();
        Mat Xc = Pc.array().rowwise() * iell.array();
        Mat Ahat = Ar.array().rowwise() * iell2.array();
        Mat Bhat = Ac.array().rowwise() * iell2.array();
        Mat Abrv = Ar.array().rowwise() * iell.array();
        Mat Bbrv = Ac.array().rowwise() * iell.array();

        const Vec srow = Sbar.rowwise().sum();
        const Vec scol = Sbar.colwise().sum();
        const Vec tarow = TAbar.rowwise().sum();
        const Vec tbcol = TBbar.colwise().sum();

        Mat Xrbar = 2.0 * ((Xr.array().colwise() * srow.array()).matrix() - Sbar * Xc);
        Mat Xcbar =
            2.0 * ((Xc.array().colwise() * scol.array()).matrix() - Sbar.transpose() * Xr);
        Mat Ahat_bar = (Pr.array().colwise() * tarow.array()).matrix() - TAbar * Pc;
        Mat Bhat_bar = TBbar.transpose() * Pr;
        Bhat_bar -= (Pc.array().colwise() * tbcol.array()).matrix();
        Mat Abrv_bar = Fbar * Bbrv;
        Mat Bbrv_bar = Fbar.transpose() * Abrv;

        if (tp.rg(i_pr)) {
          Mat acc = Xrbar.array().rowwise() * iell.array();
          acc.array() += Ahat.array().colwise() * tarow.array();
          acc.noalias() += TBbar * Bhat;
          tp.grad_ref(i_pr) += acc;
        }
        if (tp.rg(i_pc)) {
          Mat acc = Xcbar.array().rowwise() * iell.array();
          acc.noalias() -= TAbar.transpose() * Ahat;
          acc.array() -= Bhat.array().colwise() * tbcol.array();
          tp.grad_ref(i_pc) += acc;
        }
        if (tp.rg(i_ar)) {
          tp.grad_ref(i_ar).array() += Ahat_bar.array().rowwise() * iell2.array();
          tp.grad_ref(i_ar).array() += Abrv_bar.array().rowwise() * iell.array();
        }
        if (tp.rg(i_ac)) {
          tp.grad_ref(i_ac).array() += Bhat_bar.array().rowwise() * iell2.array();
          tp.grad_ref(i_ac).array() += Bbrv_bar.array().rowwise() * iell.array();
        }
        if (tp.rg(i_ell)) {
          const auto l = tp.value_at(i_ell).col(0).array();
          Eigen::ArrayXd e = Eigen::ArrayXd::Zero(D);
          e -= (Xrbar.cwiseProduct(Pr)).colwise().sum().transpose().array() / l.square();
          e -= (Xcbar.cwiseProduct(Pc)).colwise().sum().transpose().array() / l.square();
          e -= 2.0 * (Ahat_bar.cwiseProduct(Ar)).colwise().sum().transpose().array() / l.cube();
          e -= 2.0 * (Bhat_bar.cwiseProduct(Ac)).colwise().sum().transpose().array() / l.cube();
          e -= (Abrv_bar.cwiseProduct(Ar)).colwise().sum().transpose().array() / l.square();
          e -= (Bbrv_bar.cwiseProduct(Ac)).colwise().sum().transpose().array() / l.square();
          tp.grad_ref(i_ell).col(0) += e.matrix();
        }
      });
}

// Prior variance of each batch row as a tape expression: sf2 for value rows,
// sf2 * sum_d dirs_d^2/ell_d^2 for directional rows. dirs_sq holds the
// elementwise-squared direction rows (constant data).
inline ad::Var row_prior_diag(ad::Tape& t, ad::Var ell, ad::Var sf2, const Mat& dirs_sq,
                              const Vec& is_val) {
  ad::Var iell2 = t.hadamard(t.recip(ell), t.recip(ell));
  ad::Var base = t.matmul(t.constant(dirs_sq), iell2);
  return t.mul_scalar(t.add(base, t.constant(Mat(is_val))), sf2);
}

}  // namespace gpdd::graph
