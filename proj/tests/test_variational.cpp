#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <random>
#include <vector>

#include "gpdd/checkpoint.hpp"
#include "gpdd/variational.hpp"
#include "reference.hpp"

using namespace gpdd;
namespace vi = gpdd::vi;

namespace {

void fill_randn(Mat& m, Rng& rng, double scale) {
  std::normal_distribution<double> nd;
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = scale * nd(rng);
}

// sin(2 pi x) with its derivative, lightly noised, standardized.
DerivativeDataset toy_1d(Eigen::Index N, double noise, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> ud(0.0, 1.0);
  std::normal_distribution<double> nd;
  Mat X(N, 1), dY(N, 1);
  Vec y(N);
  const double tau = 2.0 * std::numbers::pi;
  for (Eigen::Index i = 0; i < N; ++i) {
    X(i, 0) = ud(rng);
    y(i) = std::sin(tau * X(i, 0)) + noise * nd(rng);
    dY(i, 0) = tau * std::cos(tau * X(i, 0)) + noise * nd(rng);
  }
  return standardize_raw(X, y, dY, BoolArray::Constant(N, 1, true));
}

// Nudges the whitened state away from the prior, keeping the factor's
// diagonal positive.
void randomize_state(vi::InducingState& st, std::uint64_t seed) {
  Rng rng(seed);
  Mat m(st.R(), 1), low(st.R(), st.R());
  fill_randn(m, rng, 0.7);
  fill_randn(low, rng, 0.15);
  st.mbar = m.col(0);
  st.Lbar = low.triangularView<Eigen::StrictlyLower>();
  std::normal_distribution<double> nd;
  for (Eigen::Index i = 0; i < st.R(); ++i) st.Lbar(i, i) = 0.6 + 0.3 * std::abs(nd(rng));
}

// Per-row data terms recomputed from the predictive moments with plain
// scalar arithmetic; with unit weights their sum plus KL is the objective.
double hand_data_term(const vi::PosteriorMoments& pm, const vi::BatchView& bv,
                      const RbfParams& th, vi::Loss loss) {
  const double l2pi = std::log(2.0 * std::numbers::pi);
  double s = 0.0;
  for (Eigen::Index r = 0; r < bv.side.rows(); ++r) {
    const double nu = bv.side.is_val(r) > 0.5 ? th.noise_y : th.noise_g;
    const double vf = std::max(pm.var_f(r), vi::kVarianceFloor);
    const double resid = bv.targets(r) - pm.mean(r);
    if (loss == vi::Loss::Elbo) {
      s += -0.5 * (l2pi + std::log(nu)) - (resid * resid + vf) / (2.0 * nu);
    } else {
      const double den = nu + vf;
      s += -0.5 * (l2pi + std::log(den) + resid * resid / den);
    }
  }
  return s;
}

// Batch view over an explicit side; targets default to zero.
vi::BatchView view_of(const GramSide& side, const Vec& targets) {
  vi::BatchView bv;
  bv.side = side;
  bv.dirs_sq = side.dirs.cwiseProduct(side.dirs);
  bv.targets = targets.size() > 0 ? targets : Vec::Zero(side.rows());
  bv.b_labels = static_cast<Eigen::Index>(side.is_val.sum());
  bv.b_partials = side.rows() - bv.b_labels;
  return bv;
}

}  // namespace

TEST_CASE("inducing initialization: subset locations, orthonormal directions") {
  DerivativeDataset ds = sample_dataset(test_function("hartmann6"), 40, 0.05, 0.05, 3);

  SECTION("p = 0 state") {
    vi::InducingState st = vi::init_inducing(ds, 9, 0, 1, vi::DirectionMode::None);
    CHECK(st.V.V.rows() == 0);
    CHECK(st.mbar.size() == 9);
    CHECK((st.Lbar - Mat::Identity(9, 9)).norm() == 0.0);
    for (int i = 0; i < 9; ++i) {
      bool found = false;
      for (Eigen::Index j = 0; j < ds.n() && !found; ++j) {
        found = (st.Z.row(i) - ds.X.row(j)).norm() == 0.0;
      }
      CHECK(found);
    }
  }

  SECTION("p <= D directions are orthonormal within each point") {
    vi::InducingState st = vi::init_inducing(ds, 6, 2, 7);
    REQUIRE(st.V.V.rows() == 12);
    for (int i = 0; i < 6; ++i) {
      Mat Vi = st.V.V.middleRows(i * 2, 2);
      CHECK((Vi * Vi.transpose() - Mat::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-12);
    }
    CHECK(st.mbar.size() == 18);
    CHECK((st.Lbar - Mat::Identity(18, 18)).norm() == 0.0);
  }

  SECTION("p > D directions are unit length") {
    DerivativeDataset d2 = sample_dataset(test_function("branin"), 20, 0.05, 0.05, 4);
    vi::InducingState st = vi::init_inducing(d2, 4, 3, 7);
    for (Eigen::Index r = 0; r < st.V.V.rows(); ++r) {
      CHECK(st.V.V.row(r).norm() == Catch::Approx(1.0).margin(1e-12));
    }
  }

  SECTION("canonical mode pins the coordinate directions") {
    DerivativeDataset d2 = sample_dataset(test_function("branin"), 20, 0.05, 0.05, 4);
    vi::InducingState st = vi::init_inducing(d2, 5, 2, 9, vi::DirectionMode::CanonicalFixed);
    for (int i = 0; i < 5; ++i)
      for (int q = 0; q < 2; ++q)
        CHECK((st.V.V.row(i * 2 + q) - Vec::Unit(2, q).transpose()).norm() == 0.0);
  }

  SECTION("seeding is deterministic") {
    vi::InducingState a = vi::init_inducing(ds, 6, 2, 42);
    vi::InducingState b = vi::init_inducing(ds, 6, 2, 42);
    CHECK((a.Z - b.Z).norm() == 0.0);
    CHECK((a.V.V - b.V.V).norm() == 0.0);
    vi::InducingState c = vi::init_inducing(ds, 6, 2, 43);
    CHECK((a.Z - c.Z).norm() > 0.0);
  }

  SECTION("bad sizes are rejected") {
    CHECK_THROWS_AS(vi::init_inducing(ds, 41, 0, 1, vi::DirectionMode::None), InvalidConfig);
    CHECK_THROWS_AS(vi::init_inducing(ds, 0, 0, 1, vi::DirectionMode::None), InvalidConfig);
    CHECK_THROWS_AS(vi::init_inducing(ds, 4, 7, 1, vi::DirectionMode::CanonicalFixed),
                    InvalidConfig);
  }
}

TEST_CASE("a fresh state reproduces the prior moments") {
  DerivativeDataset ds = sample_dataset(test_function("branin"), 25, 0.1, 0.1, 11);
  RbfParams th;
  th.ell = Vec(2);
  th.ell << 0.4, 0.7;
  th.sf2 = 1.9;
  th.mu0 = 0.3;
  vi::InducingState st = vi::init_inducing(ds, 6, 1, 5);
  vi::BatchView bv = vi::make_batch(ds, vi::full_batch_items(ds));
  vi::PosteriorMoments pm = vi::predictive_moments(th, st, bv);
  for (Eigen::Index r = 0; r < bv.side.rows(); ++r) {
    if (bv.side.is_val(r) > 0.5) {
      CHECK(pm.mean(r) == Catch::Approx(th.mu0).margin(1e-10));
      CHECK(pm.var_f(r) == Catch::Approx(th.sf2).margin(1e-10));
    } else {
      const int d = bv.side.dirs(r, 0) > 0.5 ? 0 : 1;
      CHECK(pm.mean(r) == Catch::Approx(0.0).margin(1e-10));
      CHECK(pm.var_f(r) ==
            Catch::Approx(th.sf2 / (th.ell(d) * th.ell(d))).margin(1e-10));
    }
  }
}

TEST_CASE("a collapsed posterior interpolates its targets") {
  const int M = 6;
  Mat Z(M, 2);
  Z << 0.05, 0.1, 0.95, 0.2, 0.5, 0.5, 0.1, 0.9, 0.85, 0.8, 0.45, 0.05;
  RbfParams th;
  th.ell = Vec::Constant(2, 0.25);
  th.sf2 = 1.0;
  th.mu0 = 0.15;

  Rng rng(2);
  Mat Vdir(M, 2);
  fill_randn(Vdir, rng, 1.0);
  for (int i = 0; i < M; ++i) Vdir.row(i).normalize();
  vi::InducingState st;
  st.Z = Z;
  st.V.M = M;
  st.V.p = 1;
  st.V.V = Vdir;

  GramSide zside = GramSide::inducing(Z, st.V);
  Mat tm(2 * M, 1);
  fill_randn(tm, rng, 1.0);
  Vec targets = tm.col(0);
  Vec mu_z = th.mu0 * zside.is_val;

  Mat Kzz = rbf_gram(zside, zside, th);
  CholeskyFactor f = cholesky_with_jitter(0.5 * (Kzz + Kzz.transpose()), 1e-10);
  st.mbar = solve_triangular(f, targets - mu_z).col(0);
  st.Lbar = 1e-8 * Mat::Identity(2 * M, 2 * M);

  vi::BatchView bv = view_of(zside, targets);
  vi::PosteriorMoments pm = vi::predictive_moments(th, st, bv, 1e-10);
  for (Eigen::Index r = 0; r < 2 * M; ++r) {
    CHECK(pm.mean(r) == Catch::Approx(targets(r)).margin(1e-6));
    CHECK(pm.var_f(r) <= 1e-6);
    CHECK(pm.var_f(r) >= 0.0);
  }
}

TEST_CASE("objective matches a dense unwhitened reference without directions") {
  DerivativeDataset ds = strip_gradients(sample_dataset(test_function("branin"), 30, 0.1, 0.1, 6));
  const Eigen::Index N = ds.n();
  RbfParams th;
  th.ell = Vec(2);
  th.ell << 0.4, 0.3;
  th.sf2 = 1.3;
  th.noise_y = 0.07;
  th.mu0 = 0.25;
  const int M = 7;
  vi::InducingState st = vi::init_inducing(ds, M, 0, 13, vi::DirectionMode::None);
  randomize_state(st, 14);
  const double jit_base = 1e-10;

  // Dense reference built from the scalar kernel only; the whitened-to-plain
  // map must use the same factor (with the same jitter) the library factors.
  Mat Kzz(M, M);
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < M; ++j)
      Kzz(i, j) = k(st.Z.row(i).transpose(), st.Z.row(j).transpose(), th);
  CholeskyFactor f = cholesky_with_jitter(Kzz, jit_base);
  Mat Kzz_jit = Kzz + f.jitter_used * Mat::Identity(M, M);
  Vec mu_z = Vec::Constant(M, th.mu0);
  Vec m_u = mu_z + f.lower * st.mbar;
  Mat S_u = f.lower * st.Lbar * st.Lbar.transpose() * f.lower.transpose();

  Mat Kxz(N, M);
  for (Eigen::Index i = 0; i < N; ++i)
    for (int j = 0; j < M; ++j)
      Kxz(i, j) = k(ds.X.row(i).transpose(), st.Z.row(j).transpose(), th);
  Vec kdiag = Vec::Constant(N, th.sf2);
  Vec mu_x = Vec::Constant(N, th.mu0);
  Vec nu = Vec::Constant(N, th.noise_y);
  Vec w = Vec::Ones(N);

  const double dense = refimpl::dense_elbo(Kzz_jit, Kxz, kdiag, mu_x, mu_z, m_u, S_u, ds.y, nu,
                                           w, /*predictive_loss=*/false);
  vi::ModelSpec solve{vi::Loss::Elbo, vi::DirectionMode::None, 0, vi::VarianceForm::Solve};
  vi::ModelSpec quad{vi::Loss::Elbo, vi::DirectionMode::None, 0, vi::VarianceForm::Quadratic};
  const double e_solve = vi::elbo_value(th, st, solve, ds, jit_base);
  const double e_quad = vi::elbo_value(th, st, quad, ds, jit_base);
  CHECK(e_solve == Catch::Approx(dense).margin(1e-8));
  CHECK(e_quad == Catch::Approx(dense).margin(1e-8));
  CHECK(e_solve == Catch::Approx(e_quad).margin(1e-9));

  const double dense_pred = refimpl::dense_elbo(Kzz_jit, Kxz, kdiag, mu_x, mu_z, m_u, S_u, ds.y,
                                                nu, w, /*predictive_loss=*/true);
  vi::ModelSpec pred{vi::Loss::Predictive, vi::DirectionMode::None, 0, vi::VarianceForm::Solve};
  CHECK(vi::elbo_value(th, st, pred, ds, jit_base) == Catch::Approx(dense_pred).margin(1e-8));

  // The number the objective subtracts from the data terms must be the
  // unwhitened divergence of the mapped distribution.
  vi::BatchView bv = vi::make_batch(ds, vi::full_batch_items(ds));
  vi::PosteriorMoments pm = vi::predictive_moments(th, st, bv, jit_base);
  const double kl_implied = hand_data_term(pm, bv, th, vi::Loss::Elbo) - e_solve;
  CHECK(kl_implied == Catch::Approx(refimpl::dense_kl(Kzz_jit, mu_z, m_u, S_u)).margin(1e-8));
}

TEST_CASE("canonical full-derivative model matches the interleaved dense reference") {
  DerivativeDataset ds = sample_dataset(test_function("camel"), 12, 0.1, 0.1, 21);
  const Eigen::Index N = ds.n(), D = 2;
  RbfParams th;
  th.ell = Vec(2);
  th.ell << 0.45, 0.6;
  th.sf2 = 0.9;
  th.noise_y = 0.05;
  th.noise_g = 0.09;
  th.mu0 = -0.2;
  const int M = 5;
  vi::InducingState st = vi::init_inducing(ds, M, 2, 3, vi::DirectionMode::CanonicalFixed);
  randomize_state(st, 8);
  const Eigen::Index R = st.R();
  const double jit_base = 1e-10;

  // Inducing Gram in library order, assembled per pair from value/derivative
  // blocks and permuted.
  std::vector<Eigen::Index> pz = refimpl::nabla_to_lib_perm(M, D);
  Mat Gz = refimpl::nabla_gram(st.Z, st.Z, th);
  Mat Kzz(R, R);
  for (Eigen::Index i = 0; i < R; ++i)
    for (Eigen::Index j = 0; j < R; ++j)
      Kzz(i, j) = Gz(pz[static_cast<std::size_t>(i)], pz[static_cast<std::size_t>(j)]);
  Kzz = 0.5 * (Kzz + Kzz.transpose());
  CholeskyFactor f = cholesky_with_jitter(Kzz, jit_base);
  Mat Kzz_jit = Kzz + f.jitter_used * Mat::Identity(R, R);
  Vec mu_z = Vec::Zero(R);
  mu_z.head(M).setConstant(th.mu0);
  Vec m_u = mu_z + f.lower * st.mbar;
  Mat S_u = f.lower * st.Lbar * st.Lbar.transpose() * f.lower.transpose();

  // Full-batch rows in library order: labels first, then point-major partials.
  const Eigen::Index B = N * (1 + D);
  auto xrow = [&](Eigen::Index r) {  // row of the interleaved cross Gram
    if (r < N) return r * (D + 1);
    const Eigen::Index g = r - N;
    return (g / D) * (D + 1) + 1 + (g % D);
  };
  Mat Gx = refimpl::nabla_gram(ds.X, st.Z, th);
  Mat Kxz(B, R);
  Vec kdiag(B), mu_x(B), nu(B), targets(B);
  for (Eigen::Index r = 0; r < B; ++r) {
    for (Eigen::Index j = 0; j < R; ++j) Kxz(r, j) = Gx(xrow(r), pz[static_cast<std::size_t>(j)]);
    if (r < N) {
      kdiag(r) = th.sf2;
      mu_x(r) = th.mu0;
      nu(r) = th.noise_y;
      targets(r) = ds.y(r);
    } else {
      const Eigen::Index d = (r - N) % D;
      kdiag(r) = th.sf2 / (th.ell(d) * th.ell(d));
      mu_x(r) = 0.0;
      nu(r) = th.noise_g;
      targets(r) = ds.dY((r - N) / D, d);
    }
  }

  vi::ModelSpec spec{vi::Loss::Elbo, vi::DirectionMode::CanonicalFixed, 2,
                     vi::VarianceForm::Quadratic};
  const double dense = refimpl::dense_elbo(Kzz_jit, Kxz, kdiag, mu_x, mu_z, m_u, S_u, targets,
                                           nu, Vec::Ones(B), false);
  CHECK(vi::elbo_value(th, st, spec, ds, jit_base) == Catch::Approx(dense).margin(1e-8));

  // Whitened predictive moments at fresh points equal the unwhitened map.
  Rng rng(17);
  Mat Xs(8, 2);
  {
    std::uniform_real_distribution<double> ud(0.0, 1.0);
    for (Eigen::Index i = 0; i < Xs.rows(); ++i)
      for (Eigen::Index j = 0; j < 2; ++j) Xs(i, j) = ud(rng);
  }
  GramSide tside;
  const Eigen::Index Q = Xs.rows(), T = Q * (1 + D);
  tside.pts.resize(T, D);
  tside.dirs = Mat::Zero(T, D);
  tside.is_val = Vec::Zero(T);
  tside.pts.topRows(Q) = Xs;
  tside.is_val.head(Q).setOnes();
  for (Eigen::Index i = 0; i < Q; ++i) {
    for (Eigen::Index d = 0; d < D; ++d) {
      tside.pts.row(Q + i * D + d) = Xs.row(i);
      tside.dirs(Q + i * D + d, d) = 1.0;
    }
  }
  Mat Gt = refimpl::nabla_gram(Xs, st.Z, th);
  Mat Ktz(T, R);
  Vec tdiag(T), mu_t(T);
  auto trow = [&](Eigen::Index r) {
    if (r < Q) return r * (D + 1);
    const Eigen::Index g = r - Q;
    return (g / D) * (D + 1) + 1 + (g % D);
  };
  for (Eigen::Index r = 0; r < T; ++r) {
    for (Eigen::Index j = 0; j < R; ++j) Ktz(r, j) = Gt(trow(r), pz[static_cast<std::size_t>(j)]);
    if (r < Q) {
      tdiag(r) = th.sf2;
      mu_t(r) = th.mu0;
    } else {
      const Eigen::Index d = (r - Q) % D;
      tdiag(r) = th.sf2 / (th.ell(d) * th.ell(d));
      mu_t(r) = 0.0;
    }
  }
  refimpl::DenseMoments dm = refimpl::dense_moments(Kzz_jit, Ktz, tdiag, mu_t, mu_z, m_u, S_u);
  vi::BatchView tb = view_of(tside, Vec());
  vi::PosteriorMoments pm = vi::predictive_moments(th, st, tb, jit_base);
  vi::PosteriorMoments pm_chunked = vi::predictive_moments(th, st, tb, jit_base, 3);
  for (Eigen::Index r = 0; r < T; ++r) {
    CHECK(pm.mean(r) == Catch::Approx(dm.mean(r)).margin(1e-8));
    CHECK(pm.var_f(r) == Catch::Approx(std::max(dm.var(r), 0.0)).margin(1e-8));
    CHECK(pm_chunked.mean(r) == Catch::Approx(pm.mean(r)).margin(1e-12));
    CHECK(pm_chunked.var_f(r) == Catch::Approx(pm.var_f(r)).margin(1e-12));
  }
}

TEST_CASE("divergence term vanishes at the prior and never goes negative") {
  DerivativeDataset ds = sample_dataset(test_function("stybtang"), 18, 0.1, 0.1, 2);
  RbfParams th;
  th.ell = Vec::Constant(2, 0.35);
  th.noise_y = 0.06;
  th.noise_g = 0.11;
  th.mu0 = 0.1;
  vi::ModelSpec spec{vi::Loss::Elbo, vi::DirectionMode::Learned, 1, vi::VarianceForm::Solve};
  vi::BatchView bv = vi::make_batch(ds, vi::full_batch_items(ds));

  vi::InducingState prior = vi::init_inducing(ds, 5, 1, 23);
  vi::PosteriorMoments pm = vi::predictive_moments(th, prior, bv);
  const double kl_prior =
      hand_data_term(pm, bv, th, vi::Loss::Elbo) - vi::elbo_value(th, prior, spec, ds);
  CHECK(kl_prior == Catch::Approx(0.0).margin(1e-10));

  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    vi::InducingState st = vi::init_inducing(ds, 5, 1, 23);
    randomize_state(st, 100 + seed);
    vi::PosteriorMoments pms = vi::predictive_moments(th, st, bv);
    const double kl =
        hand_data_term(pms, bv, th, vi::Loss::Elbo) - vi::elbo_value(th, st, spec, ds);
    CHECK(kl >= -1e-10);
  }
}

TEST_CASE("objective gradients match finite differences on a small toy") {
  DerivativeDataset ds = sample_dataset(test_function("camel"), 10, 0.05, 0.05, 5);
  RbfParams th;
  th.ell = Vec(2);
  th.ell << 0.45, 0.35;
  th.sf2 = 1.1;
  th.noise_y = 0.08;
  th.noise_g = 0.12;
  th.mu0 = 0.2;
  vi::InducingState st = vi::init_inducing(ds, 4, 2, 11);
  {
    Rng rng(31);
    Mat m(st.R(), 1), low(st.R(), st.R());
    fill_randn(m, rng, 0.3);
    fill_randn(low, rng, 0.05);
    st.mbar = m.col(0);
    st.Lbar = Mat(low.triangularView<Eigen::StrictlyLower>()) + Mat::Identity(st.R(), st.R());
  }
  vi::FreeParams fp = vi::FreeParams::pack(th, st);
  std::vector<Mat> at = {fp.ell_raw, fp.sf2_raw, fp.ny_raw, fp.ng_raw, fp.mu0,
                         fp.Z,       fp.V,       fp.mbar,   fp.Lraw};
  vi::BatchView bv = vi::make_batch(ds, vi::full_batch_items(ds));
  const double nl = static_cast<double>(ds.n());
  const double np = static_cast<double>(ds.n_partials());

  for (vi::Loss loss : {vi::Loss::Elbo, vi::Loss::Predictive}) {
    for (vi::VarianceForm vform : {vi::VarianceForm::Solve, vi::VarianceForm::Quadratic}) {
      vi::ModelSpec spec{loss, vi::DirectionMode::Learned, 2, vform};
      auto build = [&](ad::Tape& t, const std::vector<Mat>& xs) {
        vi::FreeParams q;
        q.ell_raw = xs[0];
        q.sf2_raw = xs[1];
        q.ny_raw = xs[2];
        q.ng_raw = xs[3];
        q.mu0 = xs[4];
        q.Z = xs[5];
        q.V = xs[6];
        q.mbar = xs[7];
        q.Lraw = xs[8];
        vi::Leaves lv = vi::lift(t, q, vi::DirectionMode::Learned);
        // With p == D the second direction of each point is an absorbable
        // recombination of its pair, so its gradient scales with the jitter.
        // A 1e-4 base keeps those slopes above the finite-difference noise
        // floor of an objective this size; the check is about correctness of
        // the adjoints, not about the jitter magnitude.
        return vi::elbo_minibatch(t, lv, spec, bv, nl, np, 1e-4);
      };
      CHECK(ad::fd_check(build, at, 1e-4) < 1e-4);
    }
  }
}

TEST_CASE("minibatch estimates average to the full objective") {
  DerivativeDataset ds = toy_1d(30, 0.05, 44);
  RbfParams th;
  th.ell = Vec::Constant(1, 0.3);
  th.noise_y = 0.05;
  th.noise_g = 0.08;
  vi::InducingState st = vi::init_inducing(ds, 5, 1, 6);
  randomize_state(st, 7);
  vi::ModelSpec spec{vi::Loss::Elbo, vi::DirectionMode::Learned, 1, vi::VarianceForm::Quadratic};
  const double full = vi::elbo_value(th, st, spec, ds);

  vi::FreeParams fp = vi::FreeParams::pack(th, st);
  std::vector<vi::BatchItem> pool = vi::full_batch_items(ds);
  Rng rng(99);
  const int K = 400;
  Vec est(K);
  for (int i = 0; i < K; ++i) {
    std::vector<vi::BatchItem> items;
    std::sample(pool.begin(), pool.end(), std::back_inserter(items), 20, rng);
    ad::Tape t;
    vi::Leaves lv = vi::lift(t, fp, spec.dirs);
    vi::BatchView bv = vi::make_batch(ds, items);
    est(i) = t.value(vi::elbo_minibatch(t, lv, spec, bv, 30.0, 30.0))(0, 0);
  }
  const double mean = est.mean();
  const double sd = std::sqrt((est.array() - mean).square().sum() / (K - 1));
  const double se = sd / std::sqrt(static_cast<double>(K));
  CHECK(std::abs(mean - full) <= 4.0 * se + 1e-9);
}

TEST_CASE("training improves the objective deterministically") {
  DerivativeDataset ds = toy_1d(200, 0.05, 77);

  vi::TrainingConfig cfg;
  cfg.M = 10;
  cfg.p = 1;
  cfg.dirs = vi::DirectionMode::Learned;
  cfg.batch = 64;
  cfg.epochs = 200;
  cfg.seed = 1;
  int calls = 0;
  cfg.on_epoch = [&](int, double loss) {
    ++calls;
    REQUIRE(std::isfinite(loss));
  };
  vi::TrainResult res = vi::train(ds, cfg);
  REQUIRE(res.trace.size() == 200);
  CHECK(calls == 200);
  CHECK(res.trace.front() - res.trace.back() >= 0.2 * std::abs(res.trace.front()));
  CHECK_NOTHROW(res.params.validate());
  for (Eigen::Index r = 0; r < res.state.V.V.rows(); ++r) {
    CHECK(res.state.V.V.row(r).norm() == Catch::Approx(1.0).margin(1e-12));
  }

  cfg.on_epoch = nullptr;
  vi::TrainResult res2 = vi::train(ds, cfg);
  CHECK(res2.trace.back() == res.trace.back());
  CHECK((res2.params.ell - res.params.ell).norm() == 0.0);
  CHECK((res2.state.mbar - res.state.mbar).norm() == 0.0);
  CHECK((res2.state.Z - res.state.Z).norm() == 0.0);
}

TEST_CASE("training handles the no-direction and canonical modes") {
  DerivativeDataset ds = toy_1d(60, 0.05, 15);

  SECTION("p = 0 on a label-only dataset") {
    DerivativeDataset labels = strip_gradients(ds);
    vi::TrainingConfig cfg;
    cfg.M = 8;
    cfg.p = 0;
    cfg.dirs = vi::DirectionMode::None;
    cfg.batch = 32;
    cfg.epochs = 30;
    vi::TrainResult res = vi::train(labels, cfg);
    CHECK(res.trace.front() > res.trace.back());
    CHECK(res.state.V.V.rows() == 0);
  }

  SECTION("canonical directions stay fixed") {
    vi::TrainingConfig cfg;
    cfg.M = 5;
    cfg.p = 1;
    cfg.dirs = vi::DirectionMode::CanonicalFixed;
    cfg.batch = 40;
    cfg.epochs = 10;
    vi::TrainResult res = vi::train(ds, cfg);
    for (int i = 0; i < 5; ++i) {
      CHECK((res.state.V.V.row(i) - Vec::Unit(1, 0).transpose()).norm() == 0.0);
    }
  }

  SECTION("directional inducing rows train on label-only data too") {
    // extra variational capacity without partial observations
    vi::TrainingConfig cfg;
    cfg.M = 5;
    cfg.p = 1;
    cfg.dirs = vi::DirectionMode::Learned;
    cfg.batch = 32;
    cfg.epochs = 30;
    vi::TrainResult res = vi::train(strip_gradients(ds), cfg);
    CHECK(res.trace.front() > res.trace.back());
    REQUIRE(res.state.V.V.rows() == 5);
    for (int i = 0; i < 5; ++i) {
      CHECK(std::abs(res.state.V.V.row(i).norm() - 1.0) <= 1e-12);
    }
  }

  SECTION("degenerate sizes are rejected") {
    vi::TrainingConfig cfg;
    cfg.batch = 0;
    CHECK_THROWS_AS(vi::train(ds, cfg), InvalidConfig);
  }
}

TEST_CASE("metric identities") {
  SECTION("a perfectly calibrated constant prediction scores zero") {
    Mat X(3, 1);
    X << 0.1, 0.5, 0.9;
    Vec y = Vec::Constant(3, 4.2);  // zero variance -> standardizes to 0
    DerivativeDataset ds = standardize_raw(X, y, Mat(), BoolArray::Constant(3, 1, false));
    RbfParams th;
    th.ell = Vec::Constant(1, 0.5);
    th.sf2 = 1.0 / (4.0 * std::numbers::pi);
    th.noise_y = 1.0 / (4.0 * std::numbers::pi);
    vi::InducingState st = vi::init_inducing(ds, 1, 0, 0, vi::DirectionMode::None);
    vi::Metrics m = vi::nll_rmse(th, st, ds);
    CHECK(m.rmse == Catch::Approx(0.0).margin(1e-12));
    CHECK(m.nll == Catch::Approx(0.0).margin(1e-12));
    CHECK_FALSE(m.has_grad);
  }

  SECTION("the prior mean predictor has unit error on standardized labels") {
    DerivativeDataset ds = sample_dataset(test_function("branin"), 50, 0.1, 0.1, 8);
    RbfParams th;
    th.ell = Vec::Constant(2, 0.4);
    vi::InducingState st = vi::init_inducing(ds, 5, 1, 3);
    vi::Metrics m = vi::nll_rmse(th, st, ds);
    CHECK(m.rmse == Catch::Approx(1.0).margin(1e-9));
    CHECK(m.has_grad);
    CHECK(std::isfinite(m.grad_nll));
    CHECK(m.grad_rmse > 0.0);
  }

  SECTION("empty test sets are rejected") {
    DerivativeDataset ds = sample_dataset(test_function("branin"), 5, 0.1, 0.1, 8);
    RbfParams th;
    th.ell = Vec::Constant(2, 0.4);
    vi::InducingState st = vi::init_inducing(ds, 2, 0, 0, vi::DirectionMode::None);
    DerivativeDataset empty;
    empty.X.resize(0, 2);
    empty.y.resize(0);
    empty.mask.resize(0, 2);
    empty.std_ = Standardization::identity(2);
    CHECK_THROWS_AS(vi::nll_rmse(th, st, empty), InvalidConfig);
  }
}

TEST_CASE("batch assembly rejects unobserved targets and empty batches") {
  Mat X(3, 2);
  X << 0.1, 0.2, 0.6, 0.4, 0.9, 0.8;
  Vec y(3);
  y << 1.0, -0.5, 0.25;
  Mat dY(3, 2);
  dY << 1.0, 2.0, 3.0, 4.0, 5.0, 6.0;
  BoolArray mask = BoolArray::Constant(3, 2, true);
  mask(1, 1) = false;
  DerivativeDataset ds = standardize_raw(X, y, dY, mask);

  CHECK_THROWS_AS(vi::make_batch(ds, {{1, 1, 0.0}}), InvalidConfig);
  CHECK_THROWS_AS(vi::make_batch(ds, {{5, -1, 0.0}}), InvalidConfig);
  CHECK_NOTHROW(vi::make_batch(ds, {{1, 0, 0.0}}));

  RbfParams th;
  th.ell = Vec::Constant(2, 0.4);
  vi::InducingState st = vi::init_inducing(ds, 2, 1, 0);
  vi::FreeParams fp = vi::FreeParams::pack(th, st);
  vi::ModelSpec spec{vi::Loss::Elbo, vi::DirectionMode::Learned, 1, vi::VarianceForm::Solve};
  ad::Tape t;
  vi::Leaves lv = vi::lift(t, fp, spec.dirs);
  vi::BatchView bv = vi::make_batch(ds, {});
  CHECK_THROWS_AS(vi::elbo_minibatch(t, lv, spec, bv, 3.0, 5.0), EmptyBatch);
}

TEST_CASE("checkpoints round-trip exactly and validate their schema") {
  DerivativeDataset ds = sample_dataset(test_function("branin"), 20, 0.1, 0.1, 5);
  RbfParams th;
  th.ell = Vec(2);
  th.ell << 0.31, 0.62;
  th.sf2 = 1.7;
  th.noise_y = 0.041;
  th.noise_g = 0.093;
  th.mu0 = -0.35;
  vi::InducingState st = vi::init_inducing(ds, 4, 2, 19);
  randomize_state(st, 20);
  vi::Checkpoint ck{vi::ModelSpec{vi::Loss::Predictive, vi::DirectionMode::Learned, 2,
                                  vi::VarianceForm::Solve},
                    th, st, ds.std_};

  const std::string path =
      (std::filesystem::temp_directory_path() / "gpdd_ck_roundtrip.json").string();
  vi::save_checkpoint(path, ck);
  vi::Checkpoint lk = vi::load_checkpoint(path);
  CHECK(lk.spec.loss == ck.spec.loss);
  CHECK(lk.spec.dirs == ck.spec.dirs);
  CHECK(lk.spec.p == ck.spec.p);
  CHECK(lk.spec.vform == ck.spec.vform);
  CHECK((lk.params.ell - th.ell).cwiseAbs().maxCoeff() == 0.0);
  CHECK(lk.params.sf2 == th.sf2);
  CHECK(lk.params.noise_g == th.noise_g);
  CHECK((lk.state.Z - st.Z).cwiseAbs().maxCoeff() == 0.0);
  CHECK((lk.state.V.V - st.V.V).cwiseAbs().maxCoeff() == 0.0);
  CHECK((lk.state.mbar - st.mbar).cwiseAbs().maxCoeff() == 0.0);
  CHECK((lk.state.Lbar - st.Lbar).cwiseAbs().maxCoeff() == 0.0);
  CHECK((lk.std_.x_shift - ds.std_.x_shift).cwiseAbs().maxCoeff() == 0.0);
  CHECK(lk.std_.y_scale == ds.std_.y_scale);
  std::filesystem::remove(path);

  const std::string bad =
      (std::filesystem::temp_directory_path() / "gpdd_ck_bad.json").string();
  {
    std::ofstream out(bad);
    out << "{\"format_version\": 99}\n";
  }
  CHECK_THROWS_AS(vi::load_checkpoint(bad), SchemaError);
  {
    std::ofstream out(bad);
    out << "{\"format_version\": 1}\n";  // everything else missing
  }
  CHECK_THROWS_AS(vi::load_checkpoint(bad), SchemaError);
  {
    std::ofstream out(bad);
    out << "not json";
  }
  CHECK_THROWS_AS(vi::load_checkpoint(bad), SchemaError);
  std::filesystem::remove(bad);
  CHECK_THROWS_AS(vi::load_checkpoint("/nonexistent/gpdd_ck.json"), SchemaError);
}
