// Sparse variational GPs whose inducing set carries p directional derivatives
// per point, trained on minibatches of labels and partial derivatives.
//
// The variational posterior is whitened: q(u) = N(mu_z + L m_bar,
// L Lbar Lbar^T L^T) with L the Cholesky factor of the augmented inducing
// Gram matrix. p = 0 reduces to plain SVGP/PPGPR; p = D with fixed canonical
// directions reproduces a GP with full inducing gradients.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "gpdd/autodiff.hpp"
#include "gpdd/common.hpp"
#include "gpdd/data.hpp"
#include "gpdd/errors.hpp"
#include "gpdd/kernel_graph.hpp"
#include "gpdd/kernels.hpp"
#include "gpdd/linalg.hpp"
#include "gpdd/optim.hpp"

namespace gpdd::vi {

enum class Loss { Elbo, Predictive };

enum class DirectionMode { None, CanonicalFixed, Learned };

// Where the training graph evaluates predictive variances. Solve whitens each
// batch cross-covariance directly (numerically gentler); Quadratic spends one
// R x R quadratic-form matrix per step so the per-row cost stays independent
// of the triangular solves. Both are exercised against each other in tests.
enum class VarianceForm { Solve, Quadratic };

struct ModelSpec {
  Loss loss = Loss::Elbo;
  DirectionMode dirs = DirectionMode::None;
  int p = 0;
  VarianceForm vform = VarianceForm::Quadratic;

  void validate(int D) const {
    if (p < 0) throw InvalidConfig("p must be nonnegative");
    if ((dirs == DirectionMode::None) != (p == 0)) {
      throw InvalidConfig("p = 0 exactly when directions are disabled");
    }
    if (dirs == DirectionMode::CanonicalFixed && p != D) {
      throw InvalidConfig("canonical fixed directions require p = D");
    }
  }
};

struct InducingState {
  Mat Z;           // M x D locations
  DirectionSet V;  // p unit directions per point
  Vec mbar;        // M(p+1) whitened mean
  Mat Lbar;        // M(p+1) square lower-triangular whitened factor, diag > 0

  Eigen::Index M() const { return Z.rows(); }
  int p() const { return V.p; }
  Eigen::Index R() const { return Z.rows() * (V.p + 1); }
};

// Z is a uniform subset of the training inputs (no replacement); directions
// start standard-normal, orthonormalized within each point when p <= D and
// merely normalized otherwise; the whitened posterior starts at the prior.
inline InducingState init_inducing(const DerivativeDataset& ds, int M, int p, std::uint64_t seed,
                                   DirectionMode mode = DirectionMode::Learned) {
  const Eigen::Index N = ds.n(), D = ds.dim();
  if (M < 1 || M > N) {
    throw InvalidConfig("M = " + std::to_string(M) + " not in [1, N = " + std::to_string(N) + "]");
  }
  if (p < 0 || (mode == DirectionMode::None && p != 0)) throw InvalidConfig("bad p");
  if (mode == DirectionMode::CanonicalFixed && p > D) {
    throw InvalidConfig("canonical directions need p <= D");
  }
  Rng rng(seed);
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(N));
  for (Eigen::Index i = 0; i < N; ++i) idx[static_cast<std::size_t>(i)] = i;
  std::shuffle(idx.begin(), idx.end(), rng);
  InducingState st;
  st.Z.resize(M, D);
  for (int i = 0; i < M; ++i) st.Z.row(i) = ds.X.row(idx[static_cast<std::size_t>(i)]);
  st.V.M = M;
  st.V.p = p;
  st.V.V.resize(static_cast<Eigen::Index>(M) * p, D);
  if (p > 0) {
    std::normal_distribution<double> nd;
    for (int i = 0; i < M; ++i) {
      for (int q = 0; q < p; ++q) {
        Vec v(D);
        for (int redraw = 0;; ++redraw) {
          if (mode == DirectionMode::CanonicalFixed) {
            v = Vec::Unit(D, q);
          } else {
            for (Eigen::Index d = 0; d < D; ++d) v(d) = nd(rng);
            if (p <= static_cast<int>(D)) {
              for (int r = 0; r < q; ++r) {
                Vec prev = st.V.V.row(i * p + r).transpose();
                v -= prev.dot(v) * prev;
              }
            }
          }
          if (v.norm() > 1e-8 || redraw > 100) break;
        }
        st.V.V.row(i * p + q) = (v / v.norm()).transpose();
      }
    }
  }
  st.mbar = Vec::Zero(st.R());
  st.Lbar = Mat::Identity(st.R(), st.R());
  return st;
}

// --- batches ----------------------------------------------------------------

// coord < 0 marks a label observation, otherwise the partial wrt coord.
struct BatchItem {
  Eigen::Index point = 0;
  int coord = -1;
  double target = 0.0;
};

inline std::vector<BatchItem> full_batch_items(const DerivativeDataset& ds) {
  std::vector<BatchItem> items;
  items.reserve(static_cast<std::size_t>(ds.n() + ds.n_partials()));
  for (Eigen::Index i = 0; i < ds.n(); ++i) items.push_back({i, -1, ds.y(i)});
  for (Eigen::Index i = 0; i < ds.n() && ds.has_gradients(); ++i) {
    for (Eigen::Index d = 0; d < ds.dim(); ++d) {
      if (ds.mask(i, d)) items.push_back({i, static_cast<int>(d), ds.dY(i, d)});
    }
  }
  return items;
}

// Materialized batch: one Gram row per item, order preserved.
struct BatchView {
  GramSide side;
  Mat dirs_sq;  // elementwise-squared direction rows
  Vec targets;
  Eigen::Index b_labels = 0, b_partials = 0;
};

inline BatchView make_batch(const DerivativeDataset& ds, const std::vector<BatchItem>& items) {
  const Eigen::Index B = static_cast<Eigen::Index>(items.size());
  const Eigen::Index D = ds.dim();
  BatchView bv;
  bv.side.pts.resize(B, D);
  bv.side.dirs = Mat::Zero(B, D);
  bv.side.is_val = Vec::Zero(B);
  bv.targets.resize(B);
  for (Eigen::Index r = 0; r < B; ++r) {
    const BatchItem& it = items[static_cast<std::size_t>(r)];
    if (it.point < 0 || it.point >= ds.n()) throw InvalidConfig("batch point out of range");
    bv.side.pts.row(r) = ds.X.row(it.point);
    bv.targets(r) = it.target;
    if (it.coord < 0) {
      bv.side.is_val(r) = 1.0;
      ++bv.b_labels;
    } else {
      if (it.coord >= D || !ds.has_gradients() || !ds.mask(it.point, it.coord)) {
        throw InvalidConfig("batch references unobserved partial");
      }
      bv.side.dirs(r, it.coord) = 1.0;
      ++bv.b_partials;
    }
  }
  bv.dirs_sq = bv.side.dirs.cwiseProduct(bv.side.dirs);
  return bv;
}

// --- free parameters and the taped loss --------------------------------------

// Optimizer-space view of (theta, state): positives are softplus-encoded and
// Lraw carries the whitened factor as [strict lower | softplus-coded diag].
struct FreeParams {
  Mat ell_raw, sf2_raw, ny_raw, ng_raw, mu0;  // ell_raw D x 1, rest 1 x 1
  Mat Z;     // M x D
  Mat V;     // (M p) x D, unit rows
  Mat mbar;  // R x 1
  Mat Lraw;  // R x R

  static FreeParams pack(const RbfParams& th, const InducingState& st) {
    th.validate();
    st.V.validate(th.dim());
    FreeParams fp;
    fp.ell_raw = th.ell.unaryExpr([](double v) { return softplus_inv(v); });
    fp.sf2_raw = Mat::Constant(1, 1, softplus_inv(th.sf2));
    fp.ny_raw = Mat::Constant(1, 1, softplus_inv(th.noise_y));
    fp.ng_raw = Mat::Constant(1, 1, softplus_inv(th.noise_g));
    fp.mu0 = Mat::Constant(1, 1, th.mu0);
    fp.Z = st.Z;
    fp.V = st.V.V;
    fp.mbar = st.mbar;
    fp.Lraw = st.Lbar.triangularView<Eigen::StrictlyLower>();
    fp.Lraw.diagonal() =
        st.Lbar.diagonal().unaryExpr([](double v) { return softplus_inv(v); });
    return fp;
  }

  RbfParams params() const {
    RbfParams th;
    th.ell.resize(ell_raw.rows());
    for (Eigen::Index d = 0; d < ell_raw.rows(); ++d) th.ell(d) = softplus(ell_raw(d, 0));
    th.sf2 = softplus(sf2_raw(0, 0));
    th.noise_y = softplus(ny_raw(0, 0));
    th.noise_g = softplus(ng_raw(0, 0));
    th.mu0 = mu0(0, 0);
    return th;
  }

  InducingState state() const {
    InducingState st;
    st.Z = Z;
    st.V.M = static_cast<int>(Z.rows());
    st.V.p = Z.rows() > 0 ? static_cast<int>(V.rows() / Z.rows()) : 0;
    st.V.V = V;
    st.mbar = mbar;
    st.Lbar = Lraw.triangularView<Eigen::StrictlyLower>();
    st.Lbar.diagonal() = Lraw.diagonal().unaryExpr([](double v) { return softplus(v); });
    return st;
  }
};

// Leaf handles for gradient extraction; creation order matches the field
// order so finite-difference harnesses can line leaves up positionally.
struct Leaves {
  ad::Var ell_raw, sf2_raw, ny_raw, ng_raw, mu0, Z, V, mbar, Lraw;
  bool v_trainable = false;
};

inline Leaves lift(ad::Tape& t, const FreeParams& fp, DirectionMode mode) {
  Leaves lv;
  lv.ell_raw = t.leaf(fp.ell_raw);
  lv.sf2_raw = t.leaf(fp.sf2_raw);
  lv.ny_raw = t.leaf(fp.ny_raw);
  lv.ng_raw = t.leaf(fp.ng_raw);
  lv.mu0 = t.leaf(fp.mu0);
  lv.Z = t.leaf(fp.Z);
  lv.v_trainable = mode == DirectionMode::Learned;
  lv.V = lv.v_trainable ? t.leaf(fp.V) : t.constant(fp.V);
  lv.mbar = t.leaf(fp.mbar);
  lv.Lraw = t.leaf(fp.Lraw);
  return lv;
}

inline constexpr double kVarianceFloor = 1e-10;

namespace detail {

// Everything the batch terms share: transformed kernel parameters, the taped
// inducing side, chol(Kzz), the whitened factor, and the closed-form KL.
struct Core {
  ad::Var ell, sf2, ny, ng;
  graph::TapedSide zside;
  ad::Var L;     // chol(Kzz)
  ad::Var Lbar;  // whitened factor with softplus diagonal
  ad::Var kl;
};

inline Core build_core(ad::Tape& t, const Leaves& lv, int M, int p, double jitter) {
  Core core;
  core.ell = t.softplus_(lv.ell_raw);
  core.sf2 = t.softplus_(lv.sf2_raw);
  core.ny = t.softplus_(lv.ny_raw);
  core.ng = t.softplus_(lv.ng_raw);
  core.zside = graph::inducing_side(t, lv.Z, lv.V, M, p);
  ad::Var G = graph::gram_fused(t, core.ell, core.sf2, core.zside, core.zside);
  ad::Var Kzz = t.scale(t.add(G, t.transpose(G)), 0.5);
  core.L = t.cholesky(Kzz, jitter);

  const Eigen::Index R = static_cast<Eigen::Index>(M) * (p + 1);
  Mat strict = Mat::Ones(R, R).triangularView<Eigen::StrictlyLower>();
  ad::Var dvec = t.softplus_(t.diag_part(lv.Lraw));
  core.Lbar = t.add(t.hadamard(lv.Lraw, t.constant(std::move(strict))), t.diag_embed(dvec));
  ad::Var sq =
      t.add(t.sum(t.hadamard(lv.mbar, lv.mbar)), t.sum(t.hadamard(core.Lbar, core.Lbar)));
  core.kl = t.add(t.sub(t.scale(sq, 0.5), t.sum(t.log_(dvec))),
                  t.constant_scalar(-0.5 * static_cast<double>(R)));
  return core;
}

struct BatchMoments {
  ad::Var mean;   // B x 1
  ad::Var var_f;  // B x 1, clamped at the variance floor
};

inline BatchMoments batch_moments(ad::Tape& t, const Core& core, ad::Var mu0,
                                  ad::Var mbar, const BatchView& bv, VarianceForm vform) {
  graph::TapedSide bside = graph::constant_side(t, bv.side.pts, bv.side.dirs, bv.side.is_val);
  ad::Var Kb = graph::gram_fused(t, core.ell, core.sf2, bside, core.zside);  // B x R
  ad::Var kdiag = graph::row_prior_diag(t, core.ell, core.sf2, bv.dirs_sq, bv.side.is_val);
  ad::Var mu_row = t.mul_scalar(t.constant(Mat(bv.side.is_val)), mu0);  // B x 1

  BatchMoments out;
  ad::Var var_raw;
  if (vform == VarianceForm::Solve) {
    ad::Var At = t.tri_solve(core.L, t.transpose(Kb));  // R x B, whitened rows
    out.mean = t.add(t.matmul_tn(At, mbar), mu_row);
    ad::Var W = t.transpose(At);
    ad::Var Wu = t.transpose(t.matmul_tn(core.Lbar, At));
    var_raw = t.add(t.sub(kdiag, t.rowsum(t.hadamard(W, W))),
                    t.rowsum(t.hadamard(Wu, Wu)));
  } else {
    const Eigen::Index R = t.value(core.L).rows();
    ad::Var T = t.tri_solve(core.L, t.constant(Mat::Identity(R, R)));  // Kzz^-T half
    ad::Var U = t.matmul_tn(core.Lbar, T);
    ad::Var Qm = t.sub(t.matmul_tn(T, T), t.matmul_tn(U, U));  // symmetric
    var_raw = t.sub(kdiag, t.row_quadratic_sym(Kb, Qm));
    out.mean = t.add(t.matmul(Kb, t.tri_solve(core.L, mbar, /*transpose_l=*/true)), mu_row);
  }
  out.var_f = t.clamp_min(var_raw, kVarianceFloor);
  return out;
}

}  // namespace detail

// ELBO / predictive-loss estimate for one minibatch as a tape variable:
// (sum_labels w_y term + sum_partials w_g term) - KL with inverse-inclusion
// weights w_y = n_labels/b_labels, w_g = n_partials/b_partials. Per row,
//   Elbo:        log N(t | mean, s2) - var_f / (2 s2)
//   Predictive:  log N(t | mean, s2 + var_f)
// where s2 is the label or gradient noise variance of the row's kind.
inline ad::Var elbo_minibatch(ad::Tape& t, const Leaves& lv, const ModelSpec& spec,
                              const BatchView& bv, double n_labels, double n_partials,
                              double jitter = -1.0) {
  const Eigen::Index B = bv.side.rows();
  if (B == 0) throw EmptyBatch("elbo_minibatch on empty batch");
  const Eigen::Index D = t.value(lv.Z).cols();
  const int M = static_cast<int>(t.value(lv.Z).rows());
  spec.validate(static_cast<int>(D));

  detail::Core core = detail::build_core(t, lv, M, spec.p, jitter);
  detail::BatchMoments bm = detail::batch_moments(t, core, lv.mu0, lv.mbar, bv, spec.vform);

  const Vec& is_val = bv.side.is_val;
  Vec not_val = Vec::Ones(B) - is_val;
  ad::Var nu_row =
      t.add(t.mul_scalar(t.constant(Mat(is_val)), core.ny),
            t.mul_scalar(t.constant(Mat(not_val)), core.ng));  // B x 1 noise per row
  ad::Var resid = t.sub(t.constant(Mat(bv.targets)), bm.mean);
  ad::Var se = t.hadamard(resid, resid);

  ad::Var rows;  // per-row log-likelihood terms, B x 1
  const double l2pi = std::log(2.0 * std::numbers::pi);
  ad::Var half_l2pi = t.constant(Mat::Constant(B, 1, -0.5 * l2pi));
  if (spec.loss == Loss::Elbo) {
    ad::Var quad = t.hadamard(t.add(se, bm.var_f), t.recip(nu_row));
    rows = t.add(half_l2pi, t.scale(t.add(t.log_(nu_row), quad), -0.5));
  } else {
    ad::Var den = t.add(nu_row, bm.var_f);
    ad::Var quad = t.hadamard(se, t.recip(den));
    rows = t.add(half_l2pi, t.scale(t.add(t.log_(den), quad), -0.5));
  }
  Vec w(B);
  for (Eigen::Index r = 0; r < B; ++r) {
    w(r) = is_val(r) > 0.5 ? n_labels / static_cast<double>(bv.b_labels)
                           : n_partials / static_cast<double>(bv.b_partials);
  }
  ad::Var data_term = t.sum(t.hadamard(t.constant(Mat(w)), rows));
  return t.sub(data_term, core.kl);
}

// Untaped full-batch ELBO at given parameters (convenience for evaluation).
inline double elbo_value(const RbfParams& th, const InducingState& st, const ModelSpec& spec,
                         const DerivativeDataset& ds, double jitter = -1.0) {
  ad::Tape t;
  FreeParams fp = FreeParams::pack(th, st);
  Leaves lv = lift(t, fp, spec.dirs);
  BatchView bv = make_batch(ds, full_batch_items(ds));
  const double nl = static_cast<double>(ds.n());
  const double ng = static_cast<double>(ds.n_partials());
  ad::Var e = elbo_minibatch(t, lv, spec, bv, nl, ng, jitter);
  return t.value(e)(0, 0);
}

// --- prediction ---------------------------------------------------------------

struct PosteriorMoments {
  Vec mean;   // per batch row
  Vec var_f;  // latent marginal variance per row (>= 0)
};

// Whitened predictive moments, evaluated without the tape in fixed-size
// chunks: mean = mu-term + A mbar, var_f = kdiag - rowsum(A o A)
// + rowsum((A Lbar) o (A Lbar)) with A = Kxz L^-T.
inline PosteriorMoments predictive_moments(const RbfParams& th, const InducingState& st,
                                           const BatchView& bv, double jitter = -1.0,
                                           Eigen::Index chunk = 2048) {
  th.validate();
  st.V.validate(th.dim());
  GramSide zside = GramSide::inducing(st.Z, st.V);
  Mat Kzz = rbf_gram(zside, zside, th);
  Kzz = 0.5 * (Kzz + Kzz.transpose());
  CholeskyFactor f = cholesky_with_jitter(Kzz, jitter);
  const Eigen::Index B = bv.side.rows();
  PosteriorMoments out;
  out.mean.resize(B);
  out.var_f.resize(B);
  Vec kdiag = gram_diag(bv.side, th);
  for (Eigen::Index lo = 0; lo < B; lo += chunk) {
    const Eigen::Index n = std::min(chunk, B - lo);
    GramSide part;
    part.pts = bv.side.pts.middleRows(lo, n);
    part.dirs = bv.side.dirs.middleRows(lo, n);
    part.is_val = bv.side.is_val.segment(lo, n);
    Mat Kxz = rbf_gram(part, zside, th);                    // n x R
    Mat At = solve_triangular(f, Kxz.transpose());          // R x n, = A^T
    Mat UL = st.Lbar.transpose().triangularView<Eigen::Upper>() * At;  // Lbar^T A^T
    out.mean.segment(lo, n) = (At.transpose() * st.mbar).col(0) +
                              th.mu0 * part.is_val;
    out.var_f.segment(lo, n) = (kdiag.segment(lo, n) -
                                At.colwise().squaredNorm().transpose() +
                                UL.colwise().squaredNorm().transpose())
                                   .cwiseMax(0.0);
  }
  return out;
}

struct Metrics {
  double nll = 0.0;       // mean negative predictive log density over labels
  double rmse = 0.0;      // root mean squared error over labels
  double grad_nll = 0.0;  // same for observed test partials (when present)
  double grad_rmse = 0.0;
  bool has_grad = false;
};

// Headline metrics use labels only; partial-derivative metrics are reported
// separately when the test set carries them.
inline Metrics nll_rmse(const RbfParams& th, const InducingState& st,
                        const DerivativeDataset& test, double jitter = -1.0) {
  if (test.n() == 0) throw InvalidConfig("empty test set");
  BatchView bv = make_batch(test, full_batch_items(test));
  PosteriorMoments pm = predictive_moments(th, st, bv, jitter);
  const double l2pi = std::log(2.0 * std::numbers::pi);
  Metrics m;
  const Eigen::Index Q = test.n();
  double se = 0.0, nll = 0.0;
  for (Eigen::Index i = 0; i < Q; ++i) {
    const double r = test.y(i) - pm.mean(i);
    const double v = std::max(pm.var_f(i) + th.noise_y, kVarianceFloor);
    se += r * r;
    nll += 0.5 * (l2pi + std::log(v) + r * r / v);
  }
  m.rmse = std::sqrt(se / static_cast<double>(Q));
  m.nll = nll / static_cast<double>(Q);
  const Eigen::Index G = bv.side.rows() - Q;
  if (G > 0) {
    double gse = 0.0, gnll = 0.0;
    for (Eigen::Index r = Q; r < bv.side.rows(); ++r) {
      const double d = bv.targets(r) - pm.mean(r);
      const double v = std::max(pm.var_f(r) + th.noise_g, kVarianceFloor);
      gse += d * d;
      gnll += 0.5 * (l2pi + std::log(v) + d * d / v);
    }
    m.grad_rmse = std::sqrt(gse / static_cast<double>(G));
    m.grad_nll = gnll / static_cast<double>(G);
    m.has_grad = true;
  }
  return m;
}

// --- training -----------------------------------------------------------------

struct TrainingConfig {
  int M = 100;
  int p = 0;
  Loss loss = Loss::Elbo;
  DirectionMode dirs = DirectionMode::None;
  VarianceForm vform = VarianceForm::Quadratic;
  Eigen::Index batch = 512;
  int epochs = 100;
  double lr = 0.01;
  double jitter = -1.0;
  std::uint64_t seed = 0;
  RbfParams init;  // ell empty -> default init below
  std::function<void(int, double)> on_epoch;  // (epoch, mean step loss)

  ModelSpec spec() const { return ModelSpec{loss, dirs, p, vform}; }
};

struct TrainResult {
  RbfParams params;
  InducingState state;
  std::vector<double> trace;  // mean minibatch loss (-objective) per epoch
};

// Shuffled single-stream minibatch ascent on the chosen objective. Every
// epoch visits each label and observed partial exactly once; direction rows
// are renormalized to unit length after every step.
inline TrainResult train(const DerivativeDataset& ds, const TrainingConfig& cfg) {
  if (cfg.batch < 1 || cfg.epochs < 1) throw InvalidConfig("batch and epochs must be >= 1");
  const int D = static_cast<int>(ds.dim());
  ModelSpec spec = cfg.spec();
  spec.validate(D);
  // p > 0 on label-only data is the no-derivative mode: directional inducing
  // rows act as extra variational capacity even without partial observations.

  RbfParams th0 = cfg.init;
  if (th0.ell.size() == 0) {
    th0.ell = Vec::Constant(D, 0.3);
    th0.sf2 = 1.0;
    th0.noise_y = 0.1;
    th0.noise_g = 0.1;
    th0.mu0 = 0.0;
  }
  InducingState st0 = init_inducing(
      ds, cfg.M, cfg.p, cfg.seed,
      spec.dirs == DirectionMode::CanonicalFixed ? DirectionMode::CanonicalFixed : spec.dirs);
  FreeParams fp = FreeParams::pack(th0, st0);

  std::vector<BatchItem> pool = full_batch_items(ds);
  const double n_labels = static_cast<double>(ds.n());
  const double n_partials = static_cast<double>(ds.n_partials());
  const bool learn_v = spec.dirs == DirectionMode::Learned;

  Adam opt(AdamConfig{.lr = cfg.lr});
  Rng rng(cfg.seed + 0x9e3779b97f4a7c15ULL);
  TrainResult res;
  res.trace.reserve(static_cast<std::size_t>(cfg.epochs));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(pool.begin(), pool.end(), rng);
    double loss_sum = 0.0;
    int steps = 0;
    for (std::size_t lo = 0; lo < pool.size(); lo += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t hi = std::min(pool.size(), lo + static_cast<std::size_t>(cfg.batch));
      std::vector<BatchItem> items(pool.begin() + static_cast<std::ptrdiff_t>(lo),
                                   pool.begin() + static_cast<std::ptrdiff_t>(hi));
      try {
        BatchView bv = make_batch(ds, items);
        ad::Tape t;
        Leaves lv = lift(t, fp, spec.dirs);
        ad::Var loss =
            t.neg(elbo_minibatch(t, lv, spec, bv, n_labels, n_partials, cfg.jitter));
        t.backward(loss);
        std::vector<Mat*> params = {&fp.ell_raw, &fp.sf2_raw, &fp.ny_raw, &fp.ng_raw,
                                    &fp.mu0,     &fp.Z,       &fp.mbar,   &fp.Lraw};
        Mat g_ell = t.grad(lv.ell_raw), g_sf2 = t.grad(lv.sf2_raw), g_ny = t.grad(lv.ny_raw),
            g_ng = t.grad(lv.ng_raw), g_mu0 = t.grad(lv.mu0), g_Z = t.grad(lv.Z),
            g_m = t.grad(lv.mbar), g_L = t.grad(lv.Lraw);
        std::vector<const Mat*> grads = {&g_ell, &g_sf2, &g_ny, &g_ng,
                                         &g_mu0, &g_Z,   &g_m,  &g_L};
        Mat g_V;
        if (learn_v) {
          params.push_back(&fp.V);
          g_V = t.grad(lv.V);
          grads.push_back(&g_V);
        }
        opt.step(params, grads, multistep_scale(epoch, cfg.epochs));
        if (learn_v) {
          for (Eigen::Index r = 0; r < fp.V.rows(); ++r) {
            const double nrm = fp.V.row(r).norm();
            if (nrm > 1e-12) fp.V.row(r) /= nrm;
          }
        }
        loss_sum += t.value(loss)(0, 0);
        ++steps;
      } catch (const Error& e) {
        throw Error("epoch " + std::to_string(epoch) + " step " + std::to_string(steps) + ": " +
                    e.what());
      }
    }
    res.trace.push_back(steps > 0 ? loss_sum / steps : 0.0);
    if (cfg.on_epoch) cfg.on_epoch(epoch, res.trace.back());
  }
  res.params = fp.params();
  res.state = fp.state();
  return res;
}

}  // namespace gpdd::vi
