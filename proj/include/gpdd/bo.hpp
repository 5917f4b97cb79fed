// Lower-confidence-bound Bayesian optimization (minimization) over exact or
// variational GP surrogates. Objective gradients, when recorded, influence the
// search only through surrogate training; the acquisition itself never reads
// them, and derivative-blind surrogates never touch the stored gradients at
// all (access to them is counted so tests can verify this).
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "gpdd/common.hpp"
#include "gpdd/data.hpp"
#include "gpdd/errors.hpp"
#include "gpdd/exact_gp.hpp"
#include "gpdd/kernels.hpp"
#include "gpdd/variational.hpp"

namespace gpdd::bo {

// --- problem description --------------------------------------------------

struct Box {
  Vec lo, hi;

  Eigen::Index dim() const { return lo.size(); }
  Vec width() const { return hi - lo; }

  void validate() const {
    if (lo.size() == 0 || lo.size() != hi.size()) {
      throw InvalidConfig("box bounds need matching nonzero sizes");
    }
    if (!lo.allFinite() || !hi.allFinite()) throw InvalidConfig("box bounds must be finite");
    if (((hi - lo).array() <= 0.0).any()) throw InvalidConfig("box needs hi > lo per dimension");
  }

  Vec clamp(const Vec& x) const { return x.cwiseMax(lo).cwiseMin(hi); }

  static Box of(const TestFunction& fn) { return Box{fn.lo, fn.hi}; }
};

enum class SurrogateKind { Svgp, Ppgpr, Dsvgp, Dppgpr, Exact };

// Whether a surrogate consumes recorded objective gradients when retrained.
inline bool uses_gradients(SurrogateKind k) {
  return k == SurrogateKind::Dsvgp || k == SurrogateKind::Dppgpr || k == SurrogateKind::Exact;
}

inline const char* kind_name(SurrogateKind k) {
  switch (k) {
    case SurrogateKind::Svgp: return "svgp";
    case SurrogateKind::Ppgpr: return "ppgpr";
    case SurrogateKind::Dsvgp: return "dsvgp";
    case SurrogateKind::Dppgpr: return "dppgpr";
    case SurrogateKind::Exact: return "exact";
  }
  return "?";
}

struct BoConfig {
  Box box;
  int budget = 60;  // total objective evaluations, including the initial design
  int init = 10;    // uniform random evaluations before the first surrogate
  int q = 1;        // suggestions per round
  double beta = 2.0;
  SurrogateKind kind = SurrogateKind::Dppgpr;
  int p = 1;                 // directions per inducing point (directional kinds)
  int M = 20;                // inducing points (variational kinds; capped at history size)
  int epochs = 40;           // retraining passes per round
  Eigen::Index batch = 256;  // minibatch rows for variational retraining
  int starts = 64;           // random descent starts per suggestion round
  int descent_steps = 100;
  double step_frac = 0.05;  // base step per dimension, as a fraction of box width
  std::uint64_t seed = 0;

  void validate() const {
    box.validate();
    if (budget < 1 || init < 1 || init > budget) {
      throw InvalidConfig("need 1 <= init <= budget");
    }
    if (q < 1) throw InvalidConfig("q must be >= 1");
    // With budget == init the run is pure random search and q is never used.
    if (init < budget && init + q > budget) {
      throw InvalidConfig("init + q must not exceed budget");
    }
    if (!(beta >= 0.0)) throw InvalidConfig("beta must be >= 0");
    if (uses_gradients(kind) && kind != SurrogateKind::Exact && p < 1) {
      throw InvalidConfig("directional surrogates need p >= 1");
    }
    if (M < 1 || epochs < 1 || batch < 1) throw InvalidConfig("M, epochs, batch must be >= 1");
    if (starts < 1 || descent_steps < 0) throw InvalidConfig("bad search budget");
    if (!(step_frac > 0.0)) throw InvalidConfig("step_frac must be > 0");
  }
};

// --- evaluation history ---------------------------------------------------

// Raw-space evaluation log. `gradients()` is the only sanctioned read path
// for surrogate training; it counts accesses so derivative-blind runs can be
// audited. Serialization helpers below read the fields directly.
struct History {
  Mat X;           // n x D raw inputs
  Vec y;           // n raw values
  Mat dY;          // n x D raw partials, zero where not observed
  BoolArray mask;  // n x D observation pattern
  std::vector<double> best;         // running minimum after each evaluation
  std::vector<std::string> errors;  // skipped evaluations, retrain failures
  mutable long dy_reads = 0;

  History() = default;
  explicit History(Eigen::Index D)
      : X(0, D), y(0), dY(0, D), mask(BoolArray::Constant(0, D, false)) {}

  Eigen::Index n() const { return X.rows(); }
  Eigen::Index dim() const { return X.cols(); }

  const Mat& gradients() const {
    ++dy_reads;
    return dY;
  }

  void append(const Vec& x, double value) { append_impl(x, value, nullptr, nullptr); }
  void append(const Vec& x, double value, const Vec& grad) { append_impl(x, value, &grad, nullptr); }
  void append(const Vec& x, double value, const Vec& grad,
              const Eigen::Array<bool, 1, Eigen::Dynamic>& observed) {
    append_impl(x, value, &grad, &observed);
  }

 private:
  void append_impl(const Vec& x, double value, const Vec* grad,
                   const Eigen::Array<bool, 1, Eigen::Dynamic>* observed) {
    const Eigen::Index D = dim();
    if (x.size() != D) throw DimensionMismatch("history expects " + std::to_string(D) + " dims");
    if (grad && grad->size() != D) throw DimensionMismatch("gradient has wrong size");
    if (observed && observed->size() != D) throw DimensionMismatch("mask has wrong size");
    const Eigen::Index i = n();
    X.conservativeResize(i + 1, D);
    y.conservativeResize(i + 1);
    dY.conservativeResize(i + 1, D);
    mask.conservativeResize(i + 1, D);
    X.row(i) = x.transpose();
    y(i) = value;
    dY.row(i).setZero();
    mask.row(i).setConstant(false);
    if (grad) {
      mask.row(i) = observed ? *observed : Eigen::Array<bool, 1, Eigen::Dynamic>::Constant(1, D, true);
      dY.row(i) = mask.row(i).select(grad->transpose().array(), 0.0).matrix();
    }
    best.push_back(best.empty() ? value : std::min(best.back(), value));
  }
};

// Index of the best (lowest) recorded value.
inline Eigen::Index incumbent(const History& h) {
  if (h.n() == 0) throw EmptyBatch("empty history has no incumbent");
  Eigen::Index arg = 0;
  h.y.minCoeff(&arg);
  return arg;
}

// --- surrogate fitting and prediction --------------------------------------

struct Surrogate {
  SurrogateKind kind = SurrogateKind::Exact;
  RbfParams th;
  DerivativeDataset data;  // standardized training snapshot (also maps queries)
  vi::InducingState st;    // variational kinds only
  vi::ModelSpec spec;
};

// Standardized training set for the given surrogate family. Derivative-blind
// families get a label-only dataset built without touching the gradient store.
inline DerivativeDataset surrogate_dataset(const History& h, bool with_gradients) {
  if (h.n() == 0) throw EmptyBatch("no evaluations recorded");
  if (with_gradients && h.mask.any()) {
    return standardize_raw(h.X, h.y, h.gradients(), h.mask);
  }
  return standardize_raw(h.X, h.y, Mat(), BoolArray());
}

inline Surrogate fit_surrogate(const History& h, const BoConfig& cfg, std::uint64_t seed) {
  Surrogate s;
  s.kind = cfg.kind;
  s.data = surrogate_dataset(h, uses_gradients(cfg.kind));
  if (cfg.kind == SurrogateKind::Exact) {
    RbfParams th0;
    th0.ell = Vec::Constant(s.data.dim(), 0.3);
    exact::FitConfig fc;
    fc.iters = cfg.epochs;
    s.th = exact::fit(th0, s.data, fc);
    return s;
  }
  vi::TrainingConfig tc;
  const bool directional = cfg.kind == SurrogateKind::Dsvgp || cfg.kind == SurrogateKind::Dppgpr;
  tc.M = static_cast<int>(std::min<Eigen::Index>(cfg.M, s.data.n()));
  tc.p = directional ? cfg.p : 0;
  tc.dirs = directional ? vi::DirectionMode::Learned : vi::DirectionMode::None;
  tc.loss = (cfg.kind == SurrogateKind::Svgp || cfg.kind == SurrogateKind::Dsvgp)
                ? vi::Loss::Elbo
                : vi::Loss::Predictive;
  tc.batch = cfg.batch;
  tc.epochs = cfg.epochs;
  tc.seed = seed;
  vi::TrainResult r = vi::train(s.data, tc);
  s.th = r.params;
  s.st = r.state;
  s.spec = tc.spec();
  return s;
}

// Latent posterior (standardized y-space) at raw-space query points.
inline vi::PosteriorMoments predict(const Surrogate& s, const Mat& Xraw) {
  if (Xraw.cols() != s.data.dim()) throw DimensionMismatch("query dimension mismatch");
  Mat Xstd = (Xraw.rowwise() - s.data.std_.x_shift.transpose()).array().rowwise() /
             s.data.std_.x_scale.transpose().array();
  if (s.kind == SurrogateKind::Exact) {
    exact::Posterior post = exact::posterior(s.th, s.data, Xstd);
    return vi::PosteriorMoments{std::move(post.mean), std::move(post.var)};
  }
  const Eigen::Index Q = Xstd.rows();
  vi::BatchView bv;
  bv.side.pts = std::move(Xstd);
  bv.side.dirs = Mat::Zero(Q, Xraw.cols());
  bv.side.is_val = Vec::Ones(Q);
  bv.dirs_sq = bv.side.dirs.cwiseProduct(bv.side.dirs);
  bv.targets = Vec::Zero(Q);
  bv.b_labels = Q;
  bv.b_partials = 0;
  return vi::predictive_moments(s.th, s.st, bv);
}

// Maps standardized moments back to raw objective units.
inline vi::PosteriorMoments to_raw(vi::PosteriorMoments pm, const Standardization& st) {
  pm.mean = (pm.mean.array() * st.y_scale + st.y_shift).matrix();
  pm.var_f *= st.y_scale * st.y_scale;
  return pm;
}

// mean - beta * sqrt(var); beta = 0 or zero variance reduce to the mean.
// Pre: beta >= 0 and variances >= 0.
inline Vec lcb(const vi::PosteriorMoments& pm, double beta) {
  return pm.mean - beta * pm.var_f.cwiseMax(0.0).cwiseSqrt();
}

// --- suggestion by projected acquisition descent ----------------------------

namespace detail {

inline Mat random_points(const Box& box, Eigen::Index n, Rng& rng) {
  std::uniform_real_distribution<double> ud(0.0, 1.0);
  Mat X(n, box.dim());
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index d = 0; d < box.dim(); ++d) {
      X(i, d) = box.lo(d) + ud(rng) * (box.hi(d) - box.lo(d));
    }
  }
  return X;
}

}  // namespace detail

// Minimizes the LCB with multi-start finite-difference descent projected onto
// the box: `starts` random starts plus up to q best-history starts, per-
// dimension moves of at most step_frac * width (decaying geometrically), and
// central differences with h_d = 1e-6 * width_d for the acquisition gradient.
// Returns q raw-space points inside the box with pairwise distance at least
// 1e-6 * |width|; randoms pad the batch when descent collapses onto fewer
// distinct optima.
inline Mat suggest(const Surrogate& s, const BoConfig& cfg, const History& h, Rng& rng) {
  const Eigen::Index D = cfg.box.dim();
  const Vec w = cfg.box.width();
  const Eigen::Index nh = std::min<Eigen::Index>(cfg.q, h.n());
  const Eigen::Index S = cfg.starts + nh;

  Mat Xc(S, D);
  Xc.topRows(cfg.starts) = detail::random_points(cfg.box, cfg.starts, rng);
  if (nh > 0) {
    std::vector<Eigen::Index> ord(static_cast<std::size_t>(h.n()));
    std::iota(ord.begin(), ord.end(), Eigen::Index{0});
    std::partial_sort(ord.begin(), ord.begin() + nh, ord.end(),
                      [&](Eigen::Index a, Eigen::Index b) { return h.y(a) < h.y(b); });
    for (Eigen::Index i = 0; i < nh; ++i) {
      Xc.row(cfg.starts + i) = cfg.box.clamp(h.X.row(ord[static_cast<std::size_t>(i)]).transpose());
    }
  }

  auto acq = [&](const Mat& pts) { return lcb(predict(s, pts), cfg.beta); };

  Mat bestX = Xc;
  Vec bestA = acq(Xc);
  const Vec fd_h = 1e-6 * w;
  Mat stencil(S * 2 * D, D);
  for (int it = 0; it < cfg.descent_steps; ++it) {
    const double step = cfg.step_frac * std::pow(0.93, it);
    for (Eigen::Index i = 0; i < S; ++i) {
      for (Eigen::Index d = 0; d < D; ++d) {
        stencil.row(i * 2 * D + 2 * d) = Xc.row(i);
        stencil(i * 2 * D + 2 * d, d) += fd_h(d);
        stencil.row(i * 2 * D + 2 * d + 1) = Xc.row(i);
        stencil(i * 2 * D + 2 * d + 1, d) -= fd_h(d);
      }
    }
    Vec av = acq(stencil);
    for (Eigen::Index i = 0; i < S; ++i) {
      Vec g(D);
      for (Eigen::Index d = 0; d < D; ++d) {
        g(d) = (av(i * 2 * D + 2 * d) - av(i * 2 * D + 2 * d + 1)) / (2.0 * fd_h(d));
      }
      const double gmax = g.cwiseAbs().maxCoeff();
      if (gmax <= 0.0 || !std::isfinite(gmax)) continue;
      Vec x = Xc.row(i).transpose() - (step / gmax) * g.cwiseProduct(w);
      Xc.row(i) = cfg.box.clamp(x).transpose();
    }
    Vec a2 = acq(Xc);
    for (Eigen::Index i = 0; i < S; ++i) {
      if (a2(i) < bestA(i)) {
        bestA(i) = a2(i);
        bestX.row(i) = Xc.row(i);
      }
    }
  }

  // Greedy pick by acquisition value, enforcing separation within the batch.
  const double min_dist = 1e-6 * w.norm();
  std::vector<Eigen::Index> ord(static_cast<std::size_t>(S));
  std::iota(ord.begin(), ord.end(), Eigen::Index{0});
  std::sort(ord.begin(), ord.end(),
            [&](Eigen::Index a, Eigen::Index b) { return bestA(a) < bestA(b); });
  Mat out(cfg.q, D);
  Eigen::Index got = 0;
  auto separated = [&](const Vec& x) {
    for (Eigen::Index j = 0; j < got; ++j) {
      if ((out.row(j).transpose() - x).norm() < min_dist) return false;
    }
    return true;
  };
  for (Eigen::Index i = 0; i < S && got < cfg.q; ++i) {
    Vec x = bestX.row(ord[static_cast<std::size_t>(i)]).transpose();
    if (separated(x)) out.row(got++) = x.transpose();
  }
  for (int tries = 0; got < cfg.q; ++tries) {
    Vec x = detail::random_points(cfg.box, 1, rng).row(0).transpose();
    if (separated(x) || tries > 1000) out.row(got++) = x.transpose();
  }
  return out;
}

// --- closed-loop driver -----------------------------------------------------

// Runs LCB optimization against an in-process objective: `init` uniform
// evaluations (gradients recorded whenever the objective provides them),
// then rounds of {retrain on the full history, suggest q points, evaluate}.
// Failed evaluations and retrains are logged in the history and skipped;
// budget == init degenerates to pure random search. The best-so-far trace is
// extended after every successful evaluation, so it is monotone by
// construction.
inline History run_bo(const BoConfig& cfg, const TestFunction& fn) {
  cfg.validate();
  if (fn.D != cfg.box.dim()) throw DimensionMismatch("objective/box dimension mismatch");
  History h(fn.D);
  Rng rng(cfg.seed);
  long attempts = 0;
  const long cap = static_cast<long>(cfg.init) + 4L * cfg.budget;
  auto try_eval = [&](const Vec& x) {
    ++attempts;
    try {
      auto [v, g] = evaluate(fn, x);
      h.append(x, v, g);
    } catch (const std::exception& e) {
      h.errors.emplace_back(std::string("evaluation failed: ") + e.what());
    }
  };
  while (h.n() < cfg.init && attempts < cap) {
    try_eval(detail::random_points(cfg.box, 1, rng).row(0).transpose());
  }
  int round = 0;
  while (h.n() < cfg.budget && attempts < cap) {
    ++round;
    Mat cand;
    try {
      Surrogate s =
          fit_surrogate(h, cfg, cfg.seed + 0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(round));
      cand = suggest(s, cfg, h, rng);
    } catch (const std::exception& e) {
      h.errors.emplace_back("round " + std::to_string(round) + " retrain failed: " + e.what());
      cand = detail::random_points(cfg.box, cfg.q, rng);
    }
    for (Eigen::Index r = 0; r < cand.rows() && h.n() < cfg.budget && attempts < cap; ++r) {
      try_eval(cand.row(r).transpose());
    }
  }
  if (attempts >= cap && h.n() < cfg.budget) {
    h.errors.emplace_back("evaluation attempt cap reached before budget");
  }
  return h;
}

// --- external (ask/tell) protocol -------------------------------------------

// Next batch for an out-of-process objective: uniform random while the initial
// design is incomplete, LCB suggestions afterwards, trimmed to the remaining
// budget (zero rows when the budget is spent).
inline Mat ask(const BoConfig& cfg, const History& h, Rng& rng) {
  cfg.validate();
  if (h.n() > 0 && h.dim() != cfg.box.dim()) throw DimensionMismatch("history/box mismatch");
  const Eigen::Index left = cfg.budget - h.n();
  if (left <= 0) return Mat(0, cfg.box.dim());
  if (h.n() < cfg.init) {
    const Eigen::Index want = std::min<Eigen::Index>(cfg.q, cfg.init - h.n());
    return detail::random_points(cfg.box, want, rng);
  }
  Surrogate s = fit_surrogate(h, cfg, cfg.seed + static_cast<std::uint64_t>(h.n()));
  Mat cand = suggest(s, cfg, h, rng);
  return cand.topRows(std::min<Eigen::Index>(cand.rows(), left));
}

// Ingests externally evaluated observations (same column convention as the
// dataset CSVs: x, y, optional per-coordinate dy).
inline void tell(History& h, const DerivativeDataset& obs) {
  for (Eigen::Index i = 0; i < obs.n(); ++i) {
    if (obs.has_gradients() && obs.mask.row(i).any()) {
      Vec g(obs.dim());
      for (Eigen::Index d = 0; d < obs.dim(); ++d) {
        g(d) = obs.mask(i, d) ? obs.raw_dy(i, d) : 0.0;
      }
      h.append(obs.raw_x(i), obs.raw_y(i), g, obs.mask.row(i));
    } else {
      h.append(obs.raw_x(i), obs.raw_y(i));
    }
  }
}

inline void tell_csv(History& h, const std::string& path) { tell(h, load_csv(path)); }

// History as a dataset for persistence: save_csv emits raw values, so writing
// this and reading it back with tell_csv round-trips the history. Reads the
// fields directly; this is a serialization path, not a surrogate input.
inline DerivativeDataset history_dataset(const History& h) {
  if (h.n() == 0) throw EmptyBatch("empty history");
  if (h.mask.any()) return standardize_raw(h.X, h.y, h.dY, h.mask);
  return standardize_raw(h.X, h.y, Mat(), BoolArray());
}

// Candidate batch for the external objective, one row per suggestion.
inline void write_candidates(const std::string& path, const Mat& X) {
  std::ofstream out(path);
  if (!out) throw SchemaError("cannot write '" + path + "'");
  for (Eigen::Index d = 0; d < X.cols(); ++d) out << (d ? "," : "") << "x" << (d + 1);
  out << "\n";
  char buf[64];
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    for (Eigen::Index d = 0; d < X.cols(); ++d) {
      std::snprintf(buf, sizeof(buf), "%.17g", X(i, d));
      out << (d ? "," : "") << buf;
    }
    out << "\n";
  }
  if (!out.good()) throw SchemaError("write failed for '" + path + "'");
}

}  // namespace gpdd::bo
