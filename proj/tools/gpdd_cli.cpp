// Command-line surface: dataset generation, model training, matched-budget
// sweeps, consistency checks, and LCB Bayesian optimization. Every command
// writes a manifest.json into its output directory recording the command,
// configuration, seed, wall time, and the files it produced.
//
// Exit codes: 0 success, 1 usage/config error, 2 numerical failure,
// 3 failed consistency check. GPDD_THREADS caps Eigen's thread count.
#include <malloc.h>

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include <Eigen/Core>

#include "gpdd/bo.hpp"
#include "gpdd/checkpoint.hpp"
#include "gpdd/common.hpp"
#include "gpdd/data.hpp"
#include "gpdd/diagnostics.hpp"
#include "gpdd/errors.hpp"
#include "gpdd/exact_gp.hpp"
#include "gpdd/variational.hpp"

using namespace gpdd;
using Json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr const char* kCliVersion = "0.1.0";

struct Timer {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
};

std::string fmt(double v, const char* spec = "%.10g") {
  char buf[64];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}

// Atomic manifest write; every file a command produces is listed here.
void write_manifest(const fs::path& dir, const std::string& command, const Json& config,
                    const std::vector<std::string>& outputs, double seconds) {
  Json j;
  j["command"] = command;
  j["version"] = kCliVersion;
  j["config"] = config;
  j["outputs"] = outputs;
  j["wall_seconds"] = seconds;
  const fs::path path = dir / "manifest.json";
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw SchemaError("cannot write '" + tmp.string() + "'");
    out << j.dump(2) << "\n";
    if (!out.good()) throw SchemaError("write failed for '" + tmp.string() + "'");
  }
  fs::rename(tmp, path);
}

// --- model naming -----------------------------------------------------------

struct ModelChoice {
  std::string name;
  bool exact = false;           // dense joint GP instead of a variational one
  bool with_gradients = false;  // consumes training partial derivatives
  vi::Loss loss = vi::Loss::Elbo;
  vi::DirectionMode dirs = vi::DirectionMode::None;
  int p = 0;  // directions per inducing point; -1 = all D, resolved per dataset
};

// Returns -2 when `full` is not `base` + optional digits, -1 for the bare
// name, and the parsed suffix otherwise.
int name_suffix(const std::string& base, const std::string& full) {
  if (full.rfind(base, 0) != 0) return -2;
  const std::string rest = full.substr(base.size());
  if (rest.empty()) return -1;
  if (!std::all_of(rest.begin(), rest.end(),
                   [](unsigned char c) { return std::isdigit(c) != 0; })) {
    return -2;
  }
  return std::stoi(rest);
}

ModelChoice parse_model(const std::string& name, int p_flag) {
  ModelChoice mc;
  mc.name = name;
  auto fixed = [&](bool exact, bool grads, vi::Loss loss, vi::DirectionMode dirs, int p) {
    if (p_flag >= 0) throw InvalidConfig("--p applies only to dsvgp/dppgpr models");
    mc.exact = exact;
    mc.with_gradients = grads;
    mc.loss = loss;
    mc.dirs = dirs;
    mc.p = p;
    return mc;
  };
  if (name == "svgp") return fixed(false, false, vi::Loss::Elbo, vi::DirectionMode::None, 0);
  if (name == "ppgpr") return fixed(false, false, vi::Loss::Predictive, vi::DirectionMode::None, 0);
  if (name == "gradsvgp") {
    return fixed(false, true, vi::Loss::Elbo, vi::DirectionMode::CanonicalFixed, -1);
  }
  if (name == "gradppgpr") {
    return fixed(false, true, vi::Loss::Predictive, vi::DirectionMode::CanonicalFixed, -1);
  }
  if (name == "exact") return fixed(true, false, vi::Loss::Elbo, vi::DirectionMode::None, 0);
  if (name == "gradgp") return fixed(true, true, vi::Loss::Elbo, vi::DirectionMode::None, -1);

  for (const auto& [base, loss] :
       {std::pair<const char*, vi::Loss>{"dsvgp", vi::Loss::Elbo},
        std::pair<const char*, vi::Loss>{"dppgpr", vi::Loss::Predictive}}) {
    const int suffix = name_suffix(base, name);
    if (suffix == -2) continue;
    int p = suffix >= 0 ? suffix : (p_flag >= 0 ? p_flag : 1);
    if (suffix >= 0 && p_flag >= 0 && p_flag != suffix) {
      throw InvalidConfig("--p contradicts the model-name suffix");
    }
    if (p < 1) throw InvalidConfig("directional models need p >= 1");
    mc.exact = false;
    mc.with_gradients = true;
    mc.loss = loss;
    mc.dirs = vi::DirectionMode::Learned;
    mc.p = p;
    return mc;
  }
  throw InvalidConfig("unknown model '" + name + "'");
}

// --- training pipeline shared by train and sweep ------------------------------

struct MetricsRow {
  std::string model;
  Eigen::Index M = 0;
  int p = 0;
  Eigen::Index size = 0;
  double nll = std::numeric_limits<double>::quiet_NaN();
  double rmse = std::numeric_limits<double>::quiet_NaN();
  double seconds = 0.0;
  std::uint64_t seed = 0;
};

constexpr const char* kMetricsHeader = "model,M,p,size,nll,rmse,seconds,seed";

std::string metrics_line(const MetricsRow& r) {
  return r.model + "," + std::to_string(r.M) + "," + std::to_string(r.p) + "," +
         std::to_string(r.size) + "," + fmt(r.nll) + "," + fmt(r.rmse) + "," +
         fmt(r.seconds, "%.3f") + "," + std::to_string(r.seed);
}

// Label NLL/RMSE of the dense model on a test set standardized like the
// training data.
vi::Metrics exact_metrics(const RbfParams& th, const DerivativeDataset& train,
                          const DerivativeDataset& test) {
  exact::Posterior post = exact::posterior(th, train, test.X);
  const double l2pi = std::log(2.0 * std::numbers::pi);
  vi::Metrics m;
  double se = 0.0, nll = 0.0;
  for (Eigen::Index i = 0; i < test.n(); ++i) {
    const double r = test.y(i) - post.mean(i);
    const double v = std::max(post.var(i) + th.noise_y, vi::kVarianceFloor);
    se += r * r;
    nll += 0.5 * (l2pi + std::log(v) + r * r / v);
  }
  m.rmse = std::sqrt(se / static_cast<double>(test.n()));
  m.nll = nll / static_cast<double>(test.n());
  return m;
}

void save_exact_checkpoint(const std::string& path, const std::string& model,
                           const RbfParams& th, const Standardization& std_) {
  Json j;
  j["format_version"] = 1;
  j["model"] = model;
  j["ell"] = std::vector<double>(th.ell.data(), th.ell.data() + th.ell.size());
  j["sf2"] = th.sf2;
  j["mu0"] = th.mu0;
  j["noise_y"] = th.noise_y;
  j["noise_g"] = th.noise_g;
  j["std"] = {{"x_shift", std::vector<double>(std_.x_shift.data(),
                                              std_.x_shift.data() + std_.x_shift.size())},
              {"x_scale", std::vector<double>(std_.x_scale.data(),
                                              std_.x_scale.data() + std_.x_scale.size())},
              {"y_shift", std_.y_shift},
              {"y_scale", std_.y_scale}};
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw SchemaError("cannot write '" + tmp + "'");
    out << j.dump(2) << "\n";
  }
  fs::rename(tmp, path);
}

// Trains one model and evaluates it; when `ckpt_path` is nonempty a checkpoint
// is written. `test` may be null (metrics stay NaN).
MetricsRow train_one(const ModelChoice& mc, const DerivativeDataset& train_full,
                     const DerivativeDataset* test, int M, int epochs, Eigen::Index batch,
                     double lr, std::uint64_t seed, const std::string& ckpt_path) {
  Timer timer;
  MetricsRow row;
  row.model = mc.name;
  row.seed = seed;
  const int D = static_cast<int>(train_full.dim());
  const int p = mc.p == -1 ? D : mc.p;
  row.p = p;
  DerivativeDataset ds = mc.with_gradients ? train_full : strip_gradients(train_full);
  if (mc.exact) {
    RbfParams th0;
    th0.ell = Vec::Constant(D, 0.3);
    exact::FitConfig fc;
    fc.iters = epochs;
    if (lr > 0) fc.lr = lr;
    RbfParams th = exact::fit(th0, ds, fc);
    row.M = ds.n();
    row.size = ds.n() + ds.n_partials();
    if (test) {
      vi::Metrics m = exact_metrics(th, ds, *test);
      row.nll = m.nll;
      row.rmse = m.rmse;
    }
    if (!ckpt_path.empty()) save_exact_checkpoint(ckpt_path, mc.name, th, ds.std_);
  } else {
    vi::TrainingConfig tc;
    tc.M = M;
    tc.p = p;
    tc.loss = mc.loss;
    tc.dirs = mc.dirs;
    tc.batch = batch;
    tc.epochs = epochs;
    if (lr > 0) tc.lr = lr;
    tc.seed = seed;
    vi::TrainResult res = vi::train(ds, tc);
    row.M = M;
    row.size = static_cast<Eigen::Index>(M) * (p + 1);
    if (test) {
      vi::Metrics m = vi::nll_rmse(res.params, res.state, *test);
      row.nll = m.nll;
      row.rmse = m.rmse;
    }
    if (!ckpt_path.empty()) {
      vi::Checkpoint ck;
      ck.spec = tc.spec();
      ck.params = res.params;
      ck.state = res.state;
      ck.std_ = ds.std_;
      vi::save_checkpoint(ckpt_path, ck);
    }
  }
  row.seconds = timer.seconds();
  return row;
}

DerivativeDataset load_test_for(const DerivativeDataset& train, const std::string& path) {
  return restandardize(load_csv(path), train.std_);
}

// --- subcommands --------------------------------------------------------------

struct GenOpts {
  std::string fn;
  Eigen::Index n = 200;
  Eigen::Index n_test = 0;  // 0 -> same as n
  double noise_y = 0.1;
  double noise_g = 0.1;
  bool no_gradients = false;
  std::uint64_t seed = 1;
  std::string out;
};

int cmd_gen(const GenOpts& o) {
  Timer timer;
  const TestFunction& fn = test_function(o.fn);
  fs::create_directories(o.out);
  const Eigen::Index n_test = o.n_test > 0 ? o.n_test : o.n;
  DerivativeDataset train = sample_dataset(fn, o.n, o.noise_y, o.noise_g, o.seed);
  DerivativeDataset test = sample_dataset(fn, n_test, o.noise_y, o.noise_g, o.seed + 1);
  if (o.no_gradients) {
    train = strip_gradients(train);
    test = strip_gradients(test);
  }
  const std::string train_path = (fs::path(o.out) / "train.csv").string();
  const std::string test_path = (fs::path(o.out) / "test.csv").string();
  save_csv(train, train_path);
  save_csv(test, test_path);
  Json cfg = {{"fn", o.fn},           {"n", o.n},           {"n_test", n_test},
              {"noise_y", o.noise_y}, {"noise_g", o.noise_g}, {"no_gradients", o.no_gradients},
              {"seed", o.seed}};
  write_manifest(o.out, "gen", cfg, {train_path, test_path}, timer.seconds());
  std::cout << "wrote " << train_path << " (" << train.n() << " pts) and " << test_path << " ("
            << test.n() << " pts)\n";
  return 0;
}

struct TrainOpts {
  std::string train, test, model, out;
  int m = 100;
  int p = -1;
  int epochs = 100;
  Eigen::Index batch = 512;
  double lr = -1.0;
  std::uint64_t seed = 0;
};

int cmd_train(const TrainOpts& o) {
  Timer timer;
  ModelChoice mc = parse_model(o.model, o.p);
  if (o.m < 1) throw InvalidConfig("--m must be >= 1");
  fs::create_directories(o.out);
  DerivativeDataset train = load_csv(o.train);
  DerivativeDataset test;
  const bool have_test = !o.test.empty();
  if (have_test) test = load_test_for(train, o.test);
  const std::string ckpt = (fs::path(o.out) / "checkpoint.json").string();
  MetricsRow row =
      train_one(mc, train, have_test ? &test : nullptr, o.m, o.epochs, o.batch, o.lr, o.seed, ckpt);
  const std::string metrics = (fs::path(o.out) / "metrics.csv").string();
  {
    std::ofstream out(metrics);
    if (!out) throw SchemaError("cannot write '" + metrics + "'");
    out << kMetricsHeader << "\n" << metrics_line(row) << "\n";
  }
  Json cfg = {{"train", o.train}, {"test", o.test},   {"model", o.model}, {"m", o.m},
              {"p", o.p},         {"epochs", o.epochs}, {"batch", o.batch}, {"lr", o.lr},
              {"seed", o.seed}};
  write_manifest(o.out, "train", cfg, {ckpt, metrics}, timer.seconds());
  std::cout << kMetricsHeader << "\n" << metrics_line(row) << "\n";
  return 0;
}

struct SweepOpts {
  std::string train, test, out;
  std::vector<Eigen::Index> sizes;
  std::vector<std::string> models;
  int epochs = 100;
  Eigen::Index batch = 512;
  double lr = -1.0;
  std::uint64_t seed = 0;
};

int cmd_sweep(const SweepOpts& o) {
  Timer timer;
  if (o.sizes.empty() || o.models.empty()) throw InvalidConfig("need --sizes and --models");
  fs::create_directories(o.out);
  DerivativeDataset train = load_csv(o.train);
  DerivativeDataset test;
  const bool have_test = !o.test.empty();
  if (have_test) test = load_test_for(train, o.test);
  const int D = static_cast<int>(train.dim());

  const std::string metrics = (fs::path(o.out) / "metrics.csv").string();
  std::ofstream out(metrics);
  if (!out) throw SchemaError("cannot write '" + metrics + "'");
  out << kMetricsHeader << "\n";
  std::cout << kMetricsHeader << "\n";
  std::uint64_t run = 0;
  for (const std::string& name : o.models) {
    ModelChoice mc = parse_model(name, -1);
    if (mc.exact) throw InvalidConfig("sweep sizes apply to variational models only");
    const int p = mc.p == -1 ? D : mc.p;
    for (Eigen::Index size : o.sizes) {
      const int M = static_cast<int>(size / (p + 1));  // floor: matched inducing-matrix budget
      if (M < 1) throw InvalidConfig("size " + std::to_string(size) + " too small for p = " +
                                     std::to_string(p));
      MetricsRow row = train_one(mc, train, have_test ? &test : nullptr, M, o.epochs, o.batch,
                                 o.lr, o.seed + run, "");
      ++run;
      out << metrics_line(row) << "\n";
      out.flush();
      std::cout << metrics_line(row) << "\n";
    }
  }
  Json cfg = {{"train", o.train}, {"test", o.test},     {"models", o.models},
              {"sizes", o.sizes}, {"epochs", o.epochs}, {"batch", o.batch},
              {"lr", o.lr},       {"seed", o.seed}};
  write_manifest(o.out, "sweep", cfg, {metrics}, timer.seconds());
  return 0;
}

struct CheckOpts {
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_check(const CheckOpts& o) {
  Timer timer;
  std::vector<diag::CheckResult> results = diag::run_checks(o.seed);
  bool all_pass = true;
  std::string report = "check,pass,max_err,threshold\n";
  for (const auto& r : results) {
    all_pass = all_pass && r.pass;
    report += r.name + "," + (r.pass ? "PASS" : "FAIL") + "," + fmt(r.max_err, "%.6g") + "," +
              fmt(r.threshold, "%.6g") + "\n";
  }
  std::cout << report;
  std::cout << (all_pass ? "all checks passed" : "CHECK FAILURES PRESENT") << "\n";
  if (!o.out.empty()) {
    fs::create_directories(o.out);
    const std::string path = (fs::path(o.out) / "check_report.csv").string();
    std::ofstream f(path);
    if (!f) throw SchemaError("cannot write '" + path + "'");
    f << report;
    write_manifest(o.out, "check", Json{{"seed", o.seed}}, {path}, timer.seconds());
  }
  return all_pass ? 0 : 3;
}

struct BoOpts {
  std::string fn, surrogate = "dppgpr1", out;
  int budget = 60, init = 10, q = 1;
  double beta = 2.0;
  int m = 20, epochs = 40, starts = 64, steps = 100;
  Eigen::Index batch = 256;
  std::vector<std::uint64_t> seeds = {0};
  bool external = false;
  std::string history;      // external mode: observations so far (may not exist yet)
  std::string box;          // external mode: "lo:hi,lo:hi,..."
};

std::pair<bo::SurrogateKind, int> parse_surrogate(const std::string& name) {
  if (name == "svgp") return {bo::SurrogateKind::Svgp, 0};
  if (name == "ppgpr") return {bo::SurrogateKind::Ppgpr, 0};
  if (name == "exact") return {bo::SurrogateKind::Exact, 0};
  for (const auto& [base, kind] :
       {std::pair<const char*, bo::SurrogateKind>{"dsvgp", bo::SurrogateKind::Dsvgp},
        std::pair<const char*, bo::SurrogateKind>{"dppgpr", bo::SurrogateKind::Dppgpr}}) {
    const int suffix = name_suffix(base, name);
    if (suffix == -2) continue;
    const int p = suffix >= 0 ? suffix : 1;
    if (p < 1) throw InvalidConfig("directional surrogates need p >= 1");
    return {kind, p};
  }
  throw InvalidConfig("unknown surrogate '" + name + "'");
}

bo::Box parse_box(const std::string& spec) {
  std::vector<double> lo, hi;
  std::size_t pos = 0;
  while (pos <= spec.size()) {
    std::size_t comma = spec.find(',', pos);
    if (comma == std::string::npos) comma = spec.size();
    const std::string dim = spec.substr(pos, comma - pos);
    const std::size_t colon = dim.find(':');
    if (colon == std::string::npos) throw InvalidConfig("--box wants lo:hi pairs, got '" + dim + "'");
    try {
      lo.push_back(std::stod(dim.substr(0, colon)));
      hi.push_back(std::stod(dim.substr(colon + 1)));
    } catch (const std::exception&) {
      throw InvalidConfig("bad --box entry '" + dim + "'");
    }
    pos = comma + 1;
  }
  bo::Box box;
  box.lo = Eigen::Map<Vec>(lo.data(), static_cast<Eigen::Index>(lo.size()));
  box.hi = Eigen::Map<Vec>(hi.data(), static_cast<Eigen::Index>(hi.size()));
  box.validate();
  return box;
}

bo::BoConfig make_bo_config(const BoOpts& o, const bo::Box& box, std::uint64_t seed) {
  bo::BoConfig cfg;
  cfg.box = box;
  cfg.budget = o.budget;
  cfg.init = o.init;
  cfg.q = o.q;
  cfg.beta = o.beta;
  auto [kind, p] = parse_surrogate(o.surrogate);
  cfg.kind = kind;
  cfg.p = p == 0 ? 1 : p;
  cfg.M = o.m;
  cfg.epochs = o.epochs;
  cfg.batch = o.batch;
  cfg.starts = o.starts;
  cfg.descent_steps = o.steps;
  cfg.seed = seed;
  cfg.validate();
  return cfg;
}

void write_trace(const std::string& path, const bo::History& h) {
  std::ofstream out(path);
  if (!out) throw SchemaError("cannot write '" + path + "'");
  out << "eval,y,best";
  for (Eigen::Index d = 0; d < h.dim(); ++d) out << ",x" << (d + 1);
  out << "\n";
  for (Eigen::Index i = 0; i < h.n(); ++i) {
    out << (i + 1) << "," << fmt(h.y(i), "%.17g") << "," << fmt(h.best[static_cast<std::size_t>(i)], "%.17g");
    for (Eigen::Index d = 0; d < h.dim(); ++d) out << "," << fmt(h.X(i, d), "%.17g");
    out << "\n";
  }
}

int cmd_bo(const BoOpts& o) {
  Timer timer;
  fs::create_directories(o.out);

  if (o.external) {
    if (o.box.empty()) throw InvalidConfig("external mode needs --box");
    bo::Box box = parse_box(o.box);
    bo::BoConfig cfg = make_bo_config(o, box, o.seeds.front());
    bo::History h(box.dim());
    if (!o.history.empty() && fs::exists(o.history)) bo::tell_csv(h, o.history);
    Rng rng(cfg.seed + static_cast<std::uint64_t>(h.n()));
    Mat X = bo::ask(cfg, h, rng);
    const std::string sug = (fs::path(o.out) / "suggestions.csv").string();
    bo::write_candidates(sug, X);
    Json cfgj = {{"surrogate", o.surrogate}, {"budget", o.budget}, {"init", o.init},
                 {"q", o.q},                 {"beta", o.beta},     {"box", o.box},
                 {"history", o.history},     {"seed", cfg.seed},   {"observed", h.n()}};
    write_manifest(o.out, "bo", cfgj, {sug}, timer.seconds());
    std::cout << "suggested " << X.rows() << " point(s) -> " << sug << "\n";
    return 0;
  }

  if (o.fn.empty()) throw InvalidConfig("closed-loop mode needs --fn");
  const TestFunction& fn = test_function(o.fn);
  const bo::Box box = bo::Box::of(fn);
  std::vector<std::string> outputs;
  std::vector<std::vector<double>> curves;
  for (std::uint64_t seed : o.seeds) {
    bo::BoConfig cfg = make_bo_config(o, box, seed);
    bo::History h = bo::run_bo(cfg, fn);
    const std::string trace =
        (fs::path(o.out) / ("trace_seed" + std::to_string(seed) + ".csv")).string();
    write_trace(trace, h);
    outputs.push_back(trace);
    curves.push_back(h.best);
    std::cout << "seed " << seed << ": " << h.n() << " evaluations, best "
              << (h.best.empty() ? std::numeric_limits<double>::quiet_NaN() : h.best.back())
              << ", " << h.errors.size() << " skipped\n";
  }

  // Median best-so-far across seeds; shorter traces carry their last value.
  const std::string curve_path = (fs::path(o.out) / "best_median.csv").string();
  {
    std::ofstream out(curve_path);
    if (!out) throw SchemaError("cannot write '" + curve_path + "'");
    out << "eval,median_best\n";
    for (int e = 0; e < o.budget; ++e) {
      std::vector<double> vals;
      for (const auto& c : curves) {
        if (c.empty()) continue;
        vals.push_back(c[static_cast<std::size_t>(std::min<int>(e, static_cast<int>(c.size()) - 1))]);
      }
      if (vals.empty()) continue;
      std::sort(vals.begin(), vals.end());
      const std::size_t n = vals.size();
      const double med = n % 2 ? vals[n / 2] : 0.5 * (vals[n / 2 - 1] + vals[n / 2]);
      out << (e + 1) << "," << fmt(med, "%.17g") << "\n";
    }
  }
  outputs.push_back(curve_path);
  Json cfgj = {{"fn", o.fn},     {"surrogate", o.surrogate}, {"budget", o.budget},
               {"init", o.init}, {"q", o.q},                 {"beta", o.beta},
               {"m", o.m},       {"epochs", o.epochs},       {"seeds", o.seeds}};
  write_manifest(o.out, "bo", cfgj, outputs, timer.seconds());
  return 0;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const InvalidConfig*>(&e) || dynamic_cast<const UnknownFunction*>(&e) ||
      dynamic_cast<const SchemaError*>(&e) || dynamic_cast<const ParseError*>(&e) ||
      dynamic_cast<const DimensionMismatch*>(&e) || dynamic_cast<const OutOfBox*>(&e) ||
      dynamic_cast<const InvalidK*>(&e) || dynamic_cast<const UnknownBatchKind*>(&e) ||
      dynamic_cast<const MissingGradients*>(&e) || dynamic_cast<const EmptyBatch*>(&e)) {
    return 1;
  }
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
  // Training steps churn through ~25 MB of Eigen temporaries; keep those
  // blocks in the arena instead of handing them back to the kernel each step.
  mallopt(M_MMAP_MAX, 0);
  mallopt(M_TRIM_THRESHOLD, -1);
#endif
  if (const char* tc = std::getenv("GPDD_THREADS")) {
    const int n = std::atoi(tc);
    if (n > 0) Eigen::setNbThreads(n);
  }

  CLI::App app{"Gaussian-process regression and Bayesian optimization with derivative data"};
  app.require_subcommand(1);

  GenOpts gen;
  CLI::App* cgen = app.add_subcommand("gen", "sample train/test CSVs from a shipped function");
  cgen->add_option("--fn", gen.fn, "function name")->required();
  cgen->add_option("--n", gen.n, "training points");
  cgen->add_option("--n-test", gen.n_test, "test points (default: same as --n)");
  cgen->add_option("--noise-y", gen.noise_y, "label noise stddev");
  cgen->add_option("--noise-g", gen.noise_g, "partial-derivative noise stddev");
  cgen->add_flag("--no-gradients", gen.no_gradients, "emit labels only");
  cgen->add_option("--seed", gen.seed, "rng seed");
  cgen->add_option("--out", gen.out, "output directory")->required();

  TrainOpts tr;
  CLI::App* ctrain = app.add_subcommand("train", "train one model, write checkpoint + metrics");
  ctrain->add_option("--train", tr.train, "training CSV")->required();
  ctrain->add_option("--test", tr.test, "test CSV (optional)");
  ctrain->add_option("--model", tr.model, "svgp|ppgpr|gradsvgp|gradppgpr|dsvgp[k]|dppgpr[k]|exact|gradgp")
      ->required();
  ctrain->add_option("--m", tr.m, "inducing points");
  ctrain->add_option("--p", tr.p, "directions per inducing point (directional models)");
  ctrain->add_option("--epochs", tr.epochs, "training epochs");
  ctrain->add_option("--batch", tr.batch, "minibatch rows");
  ctrain->add_option("--lr", tr.lr, "learning rate (default per family)");
  ctrain->add_option("--seed", tr.seed, "rng seed");
  ctrain->add_option("--out", tr.out, "output directory")->required();

  SweepOpts sw;
  CLI::App* csweep = app.add_subcommand("sweep", "train models at matched inducing-matrix sizes");
  csweep->add_option("--train", sw.train, "training CSV")->required();
  csweep->add_option("--test", sw.test, "test CSV (optional)");
  csweep->add_option("--sizes", sw.sizes, "inducing matrix sizes M(p+1)")->required()->delimiter(',');
  csweep->add_option("--models", sw.models, "comma-separated model names")->required()->delimiter(',');
  csweep->add_option("--epochs", sw.epochs, "training epochs");
  csweep->add_option("--batch", sw.batch, "minibatch rows");
  csweep->add_option("--lr", sw.lr, "learning rate");
  csweep->add_option("--seed", sw.seed, "base rng seed (rows derive from it)");
  csweep->add_option("--out", sw.out, "output directory")->required();

  CheckOpts ck;
  CLI::App* ccheck = app.add_subcommand("check", "run consistency checks (exit 3 on failure)");
  ccheck->add_option("--seed", ck.seed, "rng seed");
  ccheck->add_option("--out", ck.out, "optional report directory");

  BoOpts bopt;
  CLI::App* cbo = app.add_subcommand("bo", "LCB Bayesian optimization");
  cbo->add_option("--fn", bopt.fn, "objective (closed-loop mode)");
  cbo->add_option("--surrogate", bopt.surrogate, "svgp|ppgpr|dsvgp[k]|dppgpr[k]|exact");
  cbo->add_option("--budget", bopt.budget, "total evaluations");
  cbo->add_option("--init", bopt.init, "initial random evaluations");
  cbo->add_option("--q", bopt.q, "suggestions per round");
  cbo->add_option("--beta", bopt.beta, "LCB exploration weight");
  cbo->add_option("--m", bopt.m, "inducing points");
  cbo->add_option("--epochs", bopt.epochs, "retraining passes per round");
  cbo->add_option("--batch", bopt.batch, "retraining minibatch rows");
  cbo->add_option("--starts", bopt.starts, "descent starts");
  cbo->add_option("--steps", bopt.steps, "descent steps");
  cbo->add_option("--seeds", bopt.seeds, "seeds, one run each")->delimiter(',');
  cbo->add_flag("--external", bopt.external, "suggest for an out-of-process objective");
  cbo->add_option("--history", bopt.history, "external mode: observations CSV");
  cbo->add_option("--box", bopt.box, "external mode: bounds lo:hi,lo:hi,...");
  cbo->add_option("--out", bopt.out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*cgen) return cmd_gen(gen);
    if (*ctrain) return cmd_train(tr);
    if (*csweep) return cmd_sweep(sw);
    if (*ccheck) return cmd_check(ck);
    if (*cbo) return cmd_bo(bopt);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return 1;
}
