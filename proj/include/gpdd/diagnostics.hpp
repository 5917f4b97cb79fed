// Self-contained consistency checks runnable from the CLI: finite-difference
// validation of kernel derivatives and objective gradients, minibatch
// unbiasedness, the variational/exact recovery identity, and the evidence
// bound. Each check reports its worst observed error against a fixed
// threshold; a deliberately corrupted Hessian fixture verifies that the
// finite-difference harness actually catches sign errors.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iterator>
#include <random>
#include <string>
#include <vector>

#include "gpdd/autodiff.hpp"
#include "gpdd/common.hpp"
#include "gpdd/data.hpp"
#include "gpdd/errors.hpp"
#include "gpdd/exact_gp.hpp"
#include "gpdd/kernels.hpp"
#include "gpdd/linalg.hpp"
#include "gpdd/variational.hpp"

namespace gpdd::diag {

struct CheckResult {
  std::string name;
  bool pass = false;
  double max_err = 0.0;
  double threshold = 0.0;
};

namespace detail {

inline Vec random_point(int D, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> nd;
  Vec x(D);
  for (int d = 0; d < D; ++d) x(d) = scale * nd(rng);
  return x;
}

inline RbfParams random_params(int D, Rng& rng) {
  std::uniform_real_distribution<double> ud(0.4, 1.5);
  RbfParams th;
  th.ell.resize(D);
  for (int d = 0; d < D; ++d) th.ell(d) = ud(rng);
  th.sf2 = ud(rng);
  return th;
}

// Worst relative error of central differences of k against a supplied
// first/second-derivative implementation, over random pairs.
inline double kernel_fd_error(int D, int pairs, Rng& rng, bool second,
                              const std::function<Mat(const Vec&, const Vec&, const RbfParams&)>& hess) {
  const double h = 1e-5;
  double worst = 0.0;
  for (int t = 0; t < pairs; ++t) {
    RbfParams th = random_params(D, rng);
    Vec x = random_point(D, rng), x2 = random_point(D, rng);
    for (int d = 0; d < D; ++d) {
      Vec xp = x, xm = x;
      xp(d) += h;
      xm(d) -= h;
      if (!second) {
        const double fd = (k(xp, x2, th) - k(xm, x2, th)) / (2.0 * h);
        const double an = grad_k(x, x2, th, Wrt::First)(d);
        worst = std::max(worst, std::abs(fd - an) / std::max(1e-8, std::abs(fd)));
      } else {
        for (int e = 0; e < D; ++e) {
          const double fd =
              (grad_k(xp, x2, th, Wrt::Second)(e) - grad_k(xm, x2, th, Wrt::Second)(e)) / (2.0 * h);
          const double an = hess(x, x2, th)(d, e);
          worst = std::max(worst, std::abs(fd - an) / std::max(1e-8, std::abs(fd)));
        }
      }
    }
  }
  return worst;
}

inline DerivativeDataset toy_dataset(Eigen::Index N, std::uint64_t seed) {
  return sample_dataset(test_function("camel"), N, 0.05, 0.05, seed);
}

inline void randomize_state(vi::InducingState& st, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> nd;
  const Eigen::Index R = st.R();
  for (Eigen::Index i = 0; i < R; ++i) st.mbar(i) = 0.5 * nd(rng);
  for (Eigen::Index i = 0; i < R; ++i) {
    for (Eigen::Index j = 0; j < i; ++j) st.Lbar(i, j) = 0.1 * nd(rng);
    st.Lbar(i, i) = 0.3 + 0.2 * std::abs(nd(rng));
  }
}

}  // namespace detail

// First-order kernel derivatives against central differences.
inline CheckResult check_kernel_grad_fd(std::uint64_t seed) {
  Rng rng(seed);
  double worst = 0.0;
  for (int D : {2, 6}) {
    worst = std::max(worst, detail::kernel_fd_error(D, 25, rng, false, hess_k));
  }
  return {"kernel_grad_fd", worst <= 1e-6, worst, 1e-6};
}

// Mixed second derivatives against central differences of the first ones.
inline CheckResult check_kernel_hess_fd(std::uint64_t seed) {
  Rng rng(seed);
  double worst = 0.0;
  for (int D : {2, 6}) {
    worst = std::max(worst, detail::kernel_fd_error(D, 25, rng, true, hess_k));
  }
  return {"kernel_hess_fd", worst <= 1e-4, worst, 1e-4};
}

// The harness itself must flag a corrupted Hessian: flipping its sign has to
// push the finite-difference error far past the acceptance threshold.
inline CheckResult check_fd_detects_corruption(std::uint64_t seed) {
  Rng rng(seed);
  auto flipped = [](const Vec& x, const Vec& x2, const RbfParams& th) { return Mat(-hess_k(x, x2, th)); };
  const double err = detail::kernel_fd_error(2, 10, rng, true, flipped);
  return {"fd_detects_injected_sign_error", err > 1e-4, err, 1e-4};
}

// Directional-derivative Gram entries against v-contracted gradient/Hessian.
inline CheckResult check_directional_blocks(std::uint64_t seed) {
  Rng rng(seed);
  double worst = 0.0;
  for (int t = 0; t < 50; ++t) {
    const int D = 4;
    RbfParams th = detail::random_params(D, rng);
    Vec z1 = detail::random_point(D, rng), z2 = detail::random_point(D, rng);
    Vec v1 = detail::random_point(D, rng).normalized();
    Vec v2 = detail::random_point(D, rng).normalized();
    Mat blk = k_dir_block(z1, v1, z2, v2, th);
    const double kv = k(z1, z2, th);
    const double vg2 = grad_k(z1, z2, th, Wrt::Second).dot(v2);
    const double vg1 = grad_k(z1, z2, th, Wrt::First).dot(v1);
    const double vhv = v1.dot(hess_k(z1, z2, th) * v2);
    worst = std::max({worst, std::abs(blk(0, 0) - kv), std::abs(blk(0, 1) - vg2),
                      std::abs(blk(1, 0) - vg1), std::abs(blk(1, 1) - vhv)});
  }
  return {"directional_blocks", worst <= 1e-10, worst, 1e-10};
}

// Reverse-mode gradient of the minibatch objective against central
// differences in every free parameter.
inline CheckResult check_elbo_grad_fd(std::uint64_t seed) {
  DerivativeDataset ds = detail::toy_dataset(8, seed);
  vi::ModelSpec spec{vi::Loss::Elbo, vi::DirectionMode::Learned, 1, vi::VarianceForm::Quadratic};
  vi::InducingState st = vi::init_inducing(ds, 3, 1, seed, spec.dirs);
  detail::randomize_state(st, seed + 1);
  RbfParams th;
  th.ell = Vec::Constant(2, 0.5);
  vi::FreeParams fp = vi::FreeParams::pack(th, st);
  std::vector<Mat> at = {fp.ell_raw, fp.sf2_raw, fp.ny_raw, fp.ng_raw, fp.mu0,
                         fp.Z,       fp.V,       fp.mbar,   fp.Lraw};
  vi::BatchView bv = vi::make_batch(ds, vi::full_batch_items(ds));
  auto build = [&](ad::Tape& t, const std::vector<Mat>& xs) {
    vi::FreeParams p = fp;
    p.ell_raw = xs[0];
    p.sf2_raw = xs[1];
    p.ny_raw = xs[2];
    p.ng_raw = xs[3];
    p.mu0 = xs[4];
    p.Z = xs[5];
    p.V = xs[6];
    p.mbar = xs[7];
    p.Lraw = xs[8];
    vi::Leaves lv = vi::lift(t, p, spec.dirs);
    return vi::elbo_minibatch(t, lv, spec, bv, static_cast<double>(ds.n()),
                              static_cast<double>(ds.n_partials()), 1e-8);
  };
  const double err = ad::fd_check(build, at, 1e-5);
  return {"elbo_grad_fd", err <= 1e-4, err, 1e-4};
}

// With inducing rows covering every observed row (Z = X, canonical p = D) and
// q set to the exact conditional, the bound collapses onto the exact
// derivative-GP evidence.
inline CheckResult check_recovery(std::uint64_t seed) {
  DerivativeDataset ds = detail::toy_dataset(10, seed);
  const int D = static_cast<int>(ds.dim());
  const Eigen::Index N = ds.n();
  RbfParams th;
  th.ell = Vec::Constant(D, 0.6);
  th.sf2 = 1.4;
  th.mu0 = 0.2;
  th.noise_y = 0.05;
  th.noise_g = 0.08;

  vi::InducingState st;
  st.Z = ds.X;
  st.V.M = static_cast<int>(N);
  st.V.p = D;
  st.V.V.resize(N * D, D);
  for (Eigen::Index i = 0; i < N; ++i) {
    for (int d = 0; d < D; ++d) st.V.V.row(i * D + d) = Vec::Unit(D, d).transpose();
  }
  const Eigen::Index R = N * (D + 1);
  GramSide zside = GramSide::inducing(st.Z, st.V);
  Mat Kzz = rbf_gram(zside, zside, th);
  Kzz = 0.5 * (Kzz + Kzz.transpose());
  CholeskyFactor f = cholesky_with_jitter(Kzz, -1.0);
  Mat Kzz_jit = Kzz + f.jitter_used * Mat::Identity(R, R);

  Vec noise(R), t(R), mu_z(R);
  for (Eigen::Index r = 0; r < R; ++r) {
    const bool is_val = r < N;
    noise(r) = is_val ? th.noise_y : th.noise_g;
    mu_z(r) = is_val ? th.mu0 : 0.0;
    t(r) = is_val ? ds.y(r) : ds.dY((r - N) / D, (r - N) % D);
  }

  // exact conditional over the inducing rows: S* = (Kzz^-1 + Sigma^-1)^-1
  Mat Sinv = Kzz_jit.inverse();
  Sinv.diagonal() += noise.cwiseInverse();
  Mat S_star = Sinv.inverse();
  Vec m_star = mu_z + S_star * (noise.cwiseInverse().asDiagonal() * (t - mu_z));

  st.mbar = solve_triangular(f, m_star - mu_z);
  Eigen::LLT<Mat> llt(S_star);
  st.Lbar = solve_triangular(f, Mat(llt.matrixL()));
  vi::ModelSpec spec{vi::Loss::Elbo, vi::DirectionMode::CanonicalFixed, D, vi::VarianceForm::Solve};
  const double elbo = vi::elbo_value(th, st, spec, ds);
  const double lml = exact::lml(th, ds);
  const double err = std::abs(elbo - lml) / std::max(1.0, std::abs(lml));
  return {"recovery_full_inducing", err <= 1e-6, err, 1e-6};
}

// ELBO never exceeds the exact evidence of the same rows, whatever the
// variational state.
inline CheckResult check_evidence_bound(std::uint64_t seed) {
  DerivativeDataset ds = detail::toy_dataset(12, seed);
  RbfParams th;
  th.ell = Vec::Constant(2, 0.5);
  th.sf2 = 1.2;
  th.noise_y = 0.1;
  th.noise_g = 0.1;
  const double lml = exact::lml(th, ds);
  vi::ModelSpec spec{vi::Loss::Elbo, vi::DirectionMode::Learned, 1, vi::VarianceForm::Solve};
  double worst = -1e300;
  for (int s = 0; s < 5; ++s) {
    vi::InducingState st = vi::init_inducing(ds, 8, 1, seed + static_cast<std::uint64_t>(s), spec.dirs);
    detail::randomize_state(st, seed + 100 + static_cast<std::uint64_t>(s));
    worst = std::max(worst, vi::elbo_value(th, st, spec, ds) - lml);
  }
  return {"evidence_bound", worst <= 1e-6, worst, 1e-6};
}

// Mean of minibatch estimates of the weighted data term matches the full-batch
// value within sampling error.
inline CheckResult check_minibatch_unbiased(std::uint64_t seed) {
  DerivativeDataset ds = detail::toy_dataset(30, seed);
  RbfParams th;
  th.ell = Vec::Constant(2, 0.5);
  vi::ModelSpec spec{vi::Loss::Elbo, vi::DirectionMode::Learned, 1, vi::VarianceForm::Quadratic};
  vi::InducingState st = vi::init_inducing(ds, 5, 1, seed, spec.dirs);
  detail::randomize_state(st, seed + 7);

  const double nl = static_cast<double>(ds.n());
  const double np = static_cast<double>(ds.n_partials());
  auto objective = [&](const vi::BatchView& bv) {
    ad::Tape t;
    vi::FreeParams fp = vi::FreeParams::pack(th, st);
    vi::Leaves lv = vi::lift(t, fp, spec.dirs);
    return t.value(vi::elbo_minibatch(t, lv, spec, bv, nl, np, 1e-8))(0, 0);
  };
  const double full = objective(vi::make_batch(ds, vi::full_batch_items(ds)));

  std::vector<vi::BatchItem> pool = vi::full_batch_items(ds);
  Rng rng(seed + 11);
  const int reps = 300;
  const Eigen::Index B = 20;
  double sum = 0.0, sumsq = 0.0;
  std::vector<vi::BatchItem> pick;
  for (int r = 0; r < reps; ++r) {
    pick.clear();
    std::sample(pool.begin(), pool.end(), std::back_inserter(pick), B, rng);
    const double v = objective(vi::make_batch(ds, pick));
    sum += v;
    sumsq += v * v;
  }
  const double mean = sum / reps;
  const double sd = std::sqrt(std::max(0.0, sumsq / reps - mean * mean));
  const double se = sd / std::sqrt(static_cast<double>(reps));
  const double err = std::abs(mean - full);
  return {"minibatch_unbiased", err <= 4.0 * se + 1e-9, err, 4.0 * se + 1e-9};
}

// Whitened prior state reproduces the closed-form prior moments row by row.
inline CheckResult check_prior_moments(std::uint64_t seed) {
  DerivativeDataset ds = detail::toy_dataset(9, seed);
  RbfParams th;
  th.ell = Vec::Constant(2, 0.5);
  th.ell(1) = 0.8;
  th.sf2 = 1.7;
  th.mu0 = 0.4;
  vi::InducingState st = vi::init_inducing(ds, 4, 1, seed, vi::DirectionMode::Learned);
  vi::BatchView bv = vi::make_batch(ds, vi::full_batch_items(ds));
  vi::PosteriorMoments pm = vi::predictive_moments(th, st, bv);
  double worst = 0.0;
  for (Eigen::Index r = 0; r < bv.side.rows(); ++r) {
    if (bv.side.is_val(r) > 0.5) {
      worst = std::max(worst, std::abs(pm.mean(r) - th.mu0));
      worst = std::max(worst, std::abs(pm.var_f(r) - th.sf2));
    } else {
      const double pv = th.sf2 * bv.dirs_sq.row(r).dot(th.ell.array().square().inverse().matrix().transpose());
      worst = std::max(worst, std::abs(pm.mean(r)));
      worst = std::max(worst, std::abs(pm.var_f(r) - pv));
    }
  }
  return {"whitened_prior_moments", worst <= 1e-8, worst, 1e-8};
}

inline std::vector<CheckResult> run_checks(std::uint64_t seed) {
  return {check_kernel_grad_fd(seed),     check_kernel_hess_fd(seed + 1),
          check_fd_detects_corruption(seed + 2), check_directional_blocks(seed + 3),
          check_elbo_grad_fd(seed + 4),   check_recovery(seed + 5),
          check_evidence_bound(seed + 6), check_minibatch_unbiased(seed + 7),
          check_prior_moments(seed + 8)};
}

}  // namespace gpdd::diag
