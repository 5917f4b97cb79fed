// Exact GP regression on labels and observed partial derivatives: the joint
// Gram over [N label rows | observed-partial rows, point-major] is factored
// densely, so problem size is capped.
#pragma once

#include <cmath>
#include <numbers>
#include <utility>

#include "gpdd/autodiff.hpp"
#include "gpdd/common.hpp"
#include "gpdd/data.hpp"
#include "gpdd/errors.hpp"
#include "gpdd/kernel_graph.hpp"
#include "gpdd/kernels.hpp"
#include "gpdd/linalg.hpp"
#include "gpdd/optim.hpp"

namespace gpdd {

inline constexpr Eigen::Index kExactRowCap = 3000;

// Gram-side view of a dataset: label rows first, then one canonical-direction
// row per observed partial, point-major.
inline GramSide dataset_side(const DerivativeDataset& ds) {
  const Eigen::Index N = ds.n(), D = ds.dim();
  const Eigen::Index R = N + ds.n_partials();
  GramSide s;
  s.pts.resize(R, D);
  s.dirs = Mat::Zero(R, D);
  s.is_val = Vec::Zero(R);
  s.pts.topRows(N) = ds.X;
  s.is_val.head(N).setOnes();
  Eigen::Index r = N;
  for (Eigen::Index i = 0; i < N; ++i) {
    if (!ds.has_gradients()) break;
    for (Eigen::Index d = 0; d < D; ++d) {
      if (!ds.mask(i, d)) continue;
      s.pts.row(r) = ds.X.row(i);
      s.dirs(r, d) = 1.0;
      ++r;
    }
  }
  return s;
}

namespace exact {

namespace detail {

struct Rows {
  GramSide side;
  Vec obs;    // [y; observed dY entries], standardized
  Vec noise;  // per-row observation noise variance
};

inline Rows rows_of(const DerivativeDataset& ds, const RbfParams& th) {
  th.validate();
  if (ds.dim() != th.dim()) {
    throw DimensionMismatch("dataset dim " + std::to_string(ds.dim()) + " vs kernel dim " +
                            std::to_string(th.dim()));
  }
  Rows r;
  r.side = dataset_side(ds);
  const Eigen::Index N = ds.n(), R = r.side.rows();
  if (R > kExactRowCap) {
    throw CapExceeded("exact GP over " + std::to_string(R) + " rows exceeds cap " +
                      std::to_string(kExactRowCap));
  }
  r.obs.resize(R);
  r.obs.head(N) = ds.y;
  Eigen::Index k = N;
  for (Eigen::Index i = 0; i < N && ds.has_gradients(); ++i) {
    for (Eigen::Index d = 0; d < ds.dim(); ++d) {
      if (ds.mask(i, d)) r.obs(k++) = ds.dY(i, d);
    }
  }
  r.noise = Vec::Constant(R, th.noise_g);
  r.noise.head(N).setConstant(th.noise_y);
  return r;
}

}  // namespace detail

// Log marginal likelihood of labels and observed partials jointly.
inline double lml(const RbfParams& th, const DerivativeDataset& ds) {
  auto rows = detail::rows_of(ds, th);
  Mat K = rbf_gram(rows.side, rows.side, th);
  K = 0.5 * (K + K.transpose());
  K.diagonal() += rows.noise;
  CholeskyFactor f = cholesky_with_jitter(K);
  Mat resid = rows.obs - th.mu0 * rows.side.is_val;
  Mat w = solve_triangular(f, resid);
  const double R = static_cast<double>(rows.side.rows());
  return -0.5 * w.squaredNorm() - 0.5 * log_det(f) - 0.5 * R * std::log(2.0 * std::numbers::pi);
}

struct Posterior {
  Vec mean;   // Q latent means
  Vec var;    // Q latent variances (no observation noise)
  Mat dmean;  // Q x D posterior means of each partial (when requested)
  Mat dvar;   // Q x D latent variances of each partial
};

// Latent posterior at standardized test inputs; with_gradients adds the
// posterior over all D partials at each point.
inline Posterior posterior(const RbfParams& th, const DerivativeDataset& ds, const Mat& Xstar,
                           bool with_gradients = false) {
  auto rows = detail::rows_of(ds, th);
  if (Xstar.cols() != ds.dim()) {
    throw DimensionMismatch("test inputs have " + std::to_string(Xstar.cols()) + " dims");
  }
  Mat K = rbf_gram(rows.side, rows.side, th);
  K = 0.5 * (K + K.transpose());
  K.diagonal() += rows.noise;
  CholeskyFactor f = cholesky_with_jitter(K);
  Mat resid = rows.obs - th.mu0 * rows.side.is_val;
  Mat alpha = solve_triangular(f, solve_triangular(f, resid), /*transpose=*/true);

  const Eigen::Index Q = Xstar.rows(), D = ds.dim();
  GramSide test;
  const Eigen::Index T = with_gradients ? Q * (1 + D) : Q;
  test.pts.resize(T, D);
  test.dirs = Mat::Zero(T, D);
  test.is_val = Vec::Zero(T);
  test.pts.topRows(Q) = Xstar;
  test.is_val.head(Q).setOnes();
  if (with_gradients) {
    for (Eigen::Index i = 0; i < Q; ++i) {
      for (Eigen::Index d = 0; d < D; ++d) {
        test.pts.row(Q + i * D + d) = Xstar.row(i);
        test.dirs(Q + i * D + d, d) = 1.0;
      }
    }
  }
  Mat Kxz = rbf_gram(rows.side, test, th);       // R x T
  Vec mean_t = th.mu0 * test.is_val + Kxz.transpose() * Mat(alpha);
  Mat A = solve_triangular(f, Kxz);              // L^-1 Kxz
  Vec var_t =
      (gram_diag(test, th) - A.colwise().squaredNorm().transpose()).cwiseMax(0.0);

  Posterior out;
  out.mean = mean_t.head(Q);
  out.var = var_t.head(Q);
  if (with_gradients) {
    out.dmean.resize(Q, D);
    out.dvar.resize(Q, D);
    for (Eigen::Index i = 0; i < Q; ++i) {
      out.dmean.row(i) = mean_t.segment(Q + i * D, D).transpose();
      out.dvar.row(i) = var_t.segment(Q + i * D, D).transpose();
    }
  }
  return out;
}

struct FitConfig {
  int iters = 200;
  double lr = 0.02;
};

// Maximizes the joint lml over lengthscales, signal variance, both noises and
// the constant mean, via Adam on softplus-parameterized positives.
inline RbfParams fit(const RbfParams& th0, const DerivativeDataset& ds, FitConfig cfg = {}) {
  th0.validate();
  auto rows = detail::rows_of(ds, th0);  // validates dims and cap up front
  const Eigen::Index D = ds.dim();
  Mat ell_raw = th0.ell.unaryExpr([](double v) { return softplus_inv(v); });
  Mat sf2_raw(1, 1), ny_raw(1, 1), ng_raw(1, 1), mu0(1, 1);
  sf2_raw(0, 0) = softplus_inv(th0.sf2);
  ny_raw(0, 0) = softplus_inv(th0.noise_y);
  ng_raw(0, 0) = softplus_inv(th0.noise_g);
  mu0(0, 0) = th0.mu0;
  const bool any_partials = rows.side.rows() > ds.n();

  Adam opt(AdamConfig{.lr = cfg.lr});
  const Vec val_mask = rows.side.is_val;
  const Vec grad_mask = Vec::Ones(rows.side.rows()) - val_mask;
  for (int it = 0; it < cfg.iters; ++it) {
    ad::Tape t;
    ad::Var vell_raw = t.leaf(ell_raw);
    ad::Var vsf2_raw = t.leaf(sf2_raw);
    ad::Var vny_raw = t.leaf(ny_raw);
    ad::Var vng_raw = t.leaf(ng_raw);
    ad::Var vmu0 = t.leaf(mu0);
    ad::Var ell = t.softplus_(vell_raw);
    ad::Var sf2 = t.softplus_(vsf2_raw);
    ad::Var ny = t.softplus_(vny_raw);
    ad::Var ng = t.softplus_(vng_raw);

    graph::TapedSide side = graph::constant_side(t, rows.side.pts, rows.side.dirs,
                                                 rows.side.is_val);
    ad::Var G = graph::gram_fused(t, ell, sf2, side, side);
    ad::Var Kn = t.add_diag(G, ny, val_mask);
    if (any_partials) Kn = t.add_diag(Kn, ng, grad_mask);
    ad::Var L = t.cholesky(Kn);
    ad::Var resid = t.sub(t.constant(rows.obs),
                          t.mul_scalar(t.constant(Mat(rows.side.is_val)), vmu0));
    ad::Var w = t.tri_solve(L, resid);
    ad::Var nlml = t.add(t.scale(t.matmul_tn(w, w), 0.5), t.scale(t.log_det(L), 0.5));
    t.backward(nlml);

    std::vector<Mat*> params = {&ell_raw, &sf2_raw, &ny_raw, &ng_raw, &mu0};
    Mat gell = t.grad(vell_raw), gsf2 = t.grad(vsf2_raw), gny = t.grad(vny_raw),
        gng = t.grad(vng_raw), gmu0 = t.grad(vmu0);
    std::vector<const Mat*> grads = {&gell, &gsf2, &gny, &gng, &gmu0};
    opt.step(params, grads, multistep_scale(it, cfg.iters));
  }

  RbfParams th = th0;
  th.ell.resize(D);
  for (Eigen::Index d = 0; d < D; ++d) th.ell(d) = softplus(ell_raw(d, 0));
  th.sf2 = softplus(sf2_raw(0, 0));
  th.noise_y = softplus(ny_raw(0, 0));
  th.noise_g = softplus(ng_raw(0, 0));
  th.mu0 = mu0(0, 0);
  th.validate();
  return th;
}

}  // namespace exact
}  // namespace gpdd
