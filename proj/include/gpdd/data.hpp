// Synthetic test functions with analytic gradients, dataset generation and
// standardization, CSV ingestion/emission, and active-subspace projection.
//
// Datasets store standardized values: inputs mapped to the unit box by
// per-dimension empirical min/max, targets to zero mean and unit variance,
// partial derivatives transformed by the chain rule through both scalings.
#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numbers>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gpdd/common.hpp"
#include "gpdd/errors.hpp"

namespace gpdd {

struct Standardization {
  Vec x_shift;  // raw = std * x_scale + x_shift, per dimension
  Vec x_scale;
  double y_shift = 0.0;
  double y_scale = 1.0;

  static Standardization identity(int D) {
    Standardization s;
    s.x_shift = Vec::Zero(D);
    s.x_scale = Vec::Ones(D);
    return s;
  }
};

using BoolArray = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct DerivativeDataset {
  Mat X;           // N x D, standardized
  Vec y;           // N, standardized
  Mat dY;          // N x D standardized partials; 0 x 0 when no gradients at all
  BoolArray mask;  // N x D, which partials are observed (all false iff dY empty)
  Standardization std_;

  Eigen::Index n() const { return X.rows(); }
  Eigen::Index dim() const { return X.cols(); }
  bool has_gradients() const { return dY.size() != 0; }
  Eigen::Index n_partials() const { return has_gradients() ? mask.cast<Eigen::Index>().sum() : 0; }

  Vec raw_x(Eigen::Index i) const {
    return (X.row(i).transpose().array() * std_.x_scale.array() + std_.x_shift.array()).matrix();
  }
  double raw_y(Eigen::Index i) const { return y(i) * std_.y_scale + std_.y_shift; }
  double raw_dy(Eigen::Index i, Eigen::Index d) const {
    return dY(i, d) * std_.y_scale / std_.x_scale(d);
  }
};

struct TestFunction {
  std::string name;
  int D = 0;
  Vec lo, hi;  // box bounds
  std::function<double(const Vec&)> f;
  std::function<Vec(const Vec&)> grad;
};

// (value, analytic gradient) with a box containment check.
inline std::pair<double, Vec> evaluate(const TestFunction& fn, const Vec& x) {
  if (x.size() != fn.D) {
    throw DimensionMismatch(fn.name + " expects " + std::to_string(fn.D) + " dims, got " +
                            std::to_string(x.size()));
  }
  const double tol = 1e-9;
  for (int d = 0; d < fn.D; ++d) {
    const double pad = tol * (fn.hi(d) - fn.lo(d));
    if (x(d) < fn.lo(d) - pad || x(d) > fn.hi(d) + pad) {
      throw OutOfBox(fn.name + " coordinate " + std::to_string(d + 1) + " = " +
                     std::to_string(x(d)));
    }
  }
  return {fn.f(x), fn.grad(x)};
}

namespace detail {

inline TestFunction make_branin() {
  TestFunction fn;
  fn.name = "branin";
  fn.D = 2;
  fn.lo = Vec(2);
  fn.hi = Vec(2);
  fn.lo << -5.0, 0.0;
  fn.hi << 10.0, 15.0;
  constexpr double pi = std::numbers::pi;
  const double a = 1.0, b = 5.1 / (4.0 * pi * pi), c = 5.0 / pi, r = 6.0, s = 10.0,
               t = 1.0 / (8.0 * pi);
  fn.f = [=](const Vec& x) {
    const double u = x(1) - b * x(0) * x(0) + c * x(0) - r;
    return a * u * u + s * (1.0 - t) * std::cos(x(0)) + s;
  };
  fn.grad = [=](const Vec& x) {
    const double u = x(1) - b * x(0) * x(0) + c * x(0) - r;
    Vec g(2);
    g(0) = 2.0 * a * u * (-2.0 * b * x(0) + c) - s * (1.0 - t) * std::sin(x(0));
    g(1) = 2.0 * a * u;
    return g;
  };
  return fn;
}

inline TestFunction make_camel() {
  TestFunction fn;
  fn.name = "camel";
  fn.D = 2;
  fn.lo = Vec(2);
  fn.hi = Vec(2);
  fn.lo << -3.0, -2.0;
  fn.hi << 3.0, 2.0;
  fn.f = [](const Vec& x) {
    const double x1 = x(0), x2 = x(1);
    return (4.0 - 2.1 * x1 * x1 + x1 * x1 * x1 * x1 / 3.0) * x1 * x1 + x1 * x2 +
           (-4.0 + 4.0 * x2 * x2) * x2 * x2;
  };
  fn.grad = [](const Vec& x) {
    const double x1 = x(0), x2 = x(1);
    Vec g(2);
    g(0) = (-4.2 * x1 + 4.0 * x1 * x1 * x1 / 3.0) * x1 * x1 +
           (4.0 - 2.1 * x1 * x1 + x1 * x1 * x1 * x1 / 3.0) * 2.0 * x1 + x2;
    g(1) = x1 + 8.0 * x2 * x2 * x2 + (-4.0 + 4.0 * x2 * x2) * 2.0 * x2;
    return g;
  };
  return fn;
}

inline TestFunction make_stybtang() {
  TestFunction fn;
  fn.name = "stybtang";
  fn.D = 2;
  fn.lo = Vec::Constant(2, -5.0);
  fn.hi = Vec::Constant(2, 5.0);
  fn.f = [](const Vec& x) {
    double v = 0.0;
    for (Eigen::Index d = 0; d < x.size(); ++d) {
      const double u = x(d);
      v += u * u * u * u - 16.0 * u * u + 5.0 * u;
    }
    return 0.5 * v;
  };
  fn.grad = [](const Vec& x) {
    Vec g(x.size());
    for (Eigen::Index d = 0; d < x.size(); ++d) {
      const double u = x(d);
      g(d) = 0.5 * (4.0 * u * u * u - 32.0 * u + 5.0);
    }
    return g;
  };
  return fn;
}

inline TestFunction make_hartmann6() {
  TestFunction fn;
  fn.name = "hartmann6";
  fn.D = 6;
  fn.lo = Vec::Zero(6);
  fn.hi = Vec::Ones(6);
  static const double alpha[4] = {1.0, 1.2, 3.0, 3.2};
  static const double A[4][6] = {{10, 3, 17, 3.5, 1.7, 8},
                                 {0.05, 10, 17, 0.1, 8, 14},
                                 {3, 3.5, 1.7, 10, 17, 8},
                                 {17, 8, 0.05, 10, 0.1, 14}};
  static const double P[4][6] = {{0.1312, 0.1696, 0.5569, 0.0124, 0.8283, 0.5886},
                                 {0.2329, 0.4135, 0.8307, 0.3736, 0.1004, 0.9991},
                                 {0.2348, 0.1451, 0.3522, 0.2883, 0.3047, 0.6650},
                                 {0.4047, 0.8828, 0.8732, 0.5743, 0.1091, 0.0381}};
  fn.f = [](const Vec& x) {
    double v = 0.0;
    for (int i = 0; i < 4; ++i) {
      double e = 0.0;
      for (int j = 0; j < 6; ++j) {
        const double d = x(j) - P[i][j];
        e += A[i][j] * d * d;
      }
      v -= alpha[i] * std::exp(-e);
    }
    return v;
  };
  fn.grad = [](const Vec& x) {
    Vec g = Vec::Zero(6);
    for (int i = 0; i < 4; ++i) {
      double e = 0.0;
      for (int j = 0; j < 6; ++j) {
        const double d = x(j) - P[i][j];
        e += A[i][j] * d * d;
      }
      const double w = alpha[i] * std::exp(-e);
      for (int j = 0; j < 6; ++j) g(j) += 2.0 * w * A[i][j] * (x(j) - P[i][j]);
    }
    return g;
  };
  return fn;
}

inline TestFunction make_sin5() {
  TestFunction fn;
  fn.name = "sin5";
  fn.D = 5;
  fn.lo = Vec::Constant(5, -1.0);
  fn.hi = Vec::Constant(5, 1.0);
  constexpr double tau = 2.0 * std::numbers::pi;
  fn.f = [=](const Vec& x) { return std::sin(tau * x.squaredNorm()); };
  fn.grad = [=](const Vec& x) {
    return Vec(2.0 * tau * std::cos(tau * x.squaredNorm()) * x);
  };
  return fn;
}

}  // namespace detail

inline const std::vector<TestFunction>& test_functions() {
  static const std::vector<TestFunction> fns = {
      detail::make_branin(), detail::make_camel(), detail::make_stybtang(),
      detail::make_hartmann6(), detail::make_sin5()};
  return fns;
}

inline const TestFunction& test_function(const std::string& name) {
  for (const auto& fn : test_functions()) {
    if (fn.name == name) return fn;
  }
  throw UnknownFunction(name);
}

// Builds the standardization from raw data and applies it in place.
inline DerivativeDataset standardize_raw(Mat Xraw, Vec yraw, Mat dYraw, BoolArray mask) {
  const Eigen::Index N = Xraw.rows(), D = Xraw.cols();
  Standardization st;
  st.x_shift = Xraw.colwise().minCoeff().transpose();
  st.x_scale = (Xraw.colwise().maxCoeff().transpose() - st.x_shift).cwiseMax(0.0);
  for (Eigen::Index d = 0; d < D; ++d) {
    if (st.x_scale(d) <= 0.0) st.x_scale(d) = 1.0;
  }
  st.y_shift = N > 0 ? yraw.mean() : 0.0;
  const double var = N > 0 ? (yraw.array() - st.y_shift).square().mean() : 1.0;
  st.y_scale = var > 0.0 ? std::sqrt(var) : 1.0;

  DerivativeDataset ds;
  ds.X = (Xraw.rowwise() - st.x_shift.transpose()).array().rowwise() *
         st.x_scale.transpose().array().inverse();
  ds.y = (yraw.array() - st.y_shift) / st.y_scale;
  if (dYraw.size() != 0 && mask.any()) {
    ds.dY = dYraw.array().rowwise() * (st.x_scale.transpose().array() / st.y_scale);
    ds.mask = mask;
    // keep unobserved cells at zero so downstream sums ignore them
    ds.dY = mask.select(ds.dY.array(), 0.0).matrix();
  } else {
    ds.dY.resize(0, 0);
    ds.mask = BoolArray::Constant(N, D, false);
  }
  ds.std_ = std::move(st);
  return ds;
}

// Uniform-in-box inputs with iid Gaussian noise on the value and each partial
// derivative (noise in raw space), then standardization.
inline DerivativeDataset sample_dataset(const TestFunction& fn, Eigen::Index N, double noise_y,
                                        double noise_g, std::uint64_t seed) {
  if (N < 1) throw InvalidConfig("sample_dataset needs N >= 1");
  if (noise_y < 0.0 || noise_g < 0.0) throw InvalidConfig("noise must be nonnegative");
  Rng rng(seed);
  std::normal_distribution<double> nd;
  Mat X(N, fn.D);
  Vec y(N);
  Mat dY(N, fn.D);
  for (Eigen::Index i = 0; i < N; ++i) {
    Vec x(fn.D);
    for (int d = 0; d < fn.D; ++d) {
      std::uniform_real_distribution<double> ud(fn.lo(d), fn.hi(d));
      x(d) = ud(rng);
    }
    X.row(i) = x;
    auto [fv, gv] = evaluate(fn, x);
    y(i) = fv + noise_y * nd(rng);
    for (int d = 0; d < fn.D; ++d) dY(i, d) = gv(d) + noise_g * nd(rng);
  }
  return standardize_raw(std::move(X), std::move(y), std::move(dY),
                         BoolArray::Constant(N, fn.D, true));
}

inline DerivativeDataset strip_gradients(const DerivativeDataset& ds) {
  DerivativeDataset out = ds;
  out.dY.resize(0, 0);
  out.mask = BoolArray::Constant(ds.n(), ds.dim(), false);
  return out;
}

// Re-expresses a dataset's standardized values under a different
// standardization (e.g. apply the train standardizer to a test set).
inline DerivativeDataset restandardize(const DerivativeDataset& ds, const Standardization& st) {
  DerivativeDataset out = ds;
  out.std_ = st;
  for (Eigen::Index i = 0; i < ds.n(); ++i) {
    for (Eigen::Index d = 0; d < ds.dim(); ++d) {
      const double raw = ds.X(i, d) * ds.std_.x_scale(d) + ds.std_.x_shift(d);
      out.X(i, d) = (raw - st.x_shift(d)) / st.x_scale(d);
    }
    out.y(i) = (ds.raw_y(i) - st.y_shift) / st.y_scale;
    if (ds.has_gradients()) {
      for (Eigen::Index d = 0; d < ds.dim(); ++d) {
        if (ds.mask(i, d)) out.dY(i, d) = ds.raw_dy(i, d) * st.x_scale(d) / st.y_scale;
      }
    }
  }
  return out;
}

// --- CSV ------------------------------------------------------------------

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  out.push_back(trim(cur));
  return out;
}

inline double parse_real(const std::string& tok, std::size_t line_no) {
  const char* b = tok.data();
  const char* e = tok.data() + tok.size();
  double v = 0.0;
  auto res = std::from_chars(b, e, v);
  if (res.ec != std::errc() || res.ptr != e) {
    throw ParseError(line_no, "malformed real '" + tok + "'");
  }
  return v;
}

}  // namespace detail

// Header x1..xD,y[,dy1..dyD-subset]; empty dy cells mean unobserved partials.
// Values are raw-space; standardization is rebuilt from the file contents.
inline DerivativeDataset load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw SchemaError("empty file '" + path + "'");
  auto header = detail::split_csv_line(line);
  int D = 0;
  int y_col = -1;
  std::vector<int> x_col, dy_col;  // by coordinate, -1 when the column is absent
  {
    std::vector<std::pair<int, int>> xs, dys;  // (coordinate, column)
    for (std::size_t j = 0; j < header.size(); ++j) {
      const std::string& h = header[j];
      auto coord_of = [&](std::size_t prefix_len) {
        int c = 0;
        auto res = std::from_chars(h.data() + prefix_len, h.data() + h.size(), c);
        if (res.ec != std::errc() || res.ptr != h.data() + h.size() || c < 1) {
          throw SchemaError("bad column name '" + h + "'");
        }
        return c;
      };
      if (h == "y") {
        if (y_col >= 0) throw SchemaError("duplicate y column");
        y_col = static_cast<int>(j);
      } else if (h.rfind("dy", 0) == 0) {
        dys.emplace_back(coord_of(2), static_cast<int>(j));
      } else if (h.rfind("x", 0) == 0) {
        xs.emplace_back(coord_of(1), static_cast<int>(j));
      } else {
        throw SchemaError("unknown column '" + h + "'");
      }
    }
    if (y_col < 0) throw SchemaError("missing y column");
    if (xs.empty()) throw SchemaError("no x columns");
    for (auto& [c, j] : xs) D = std::max(D, c);
    x_col.assign(D, -1);
    dy_col.assign(D, -1);
    for (auto& [c, j] : xs) {
      if (x_col[c - 1] >= 0) throw SchemaError("duplicate column x" + std::to_string(c));
      x_col[c - 1] = j;
    }
    for (int d = 0; d < D; ++d) {
      if (x_col[d] < 0) throw SchemaError("missing column x" + std::to_string(d + 1));
    }
    for (auto& [c, j] : dys) {
      if (c > D) throw SchemaError("dy" + std::to_string(c) + " beyond input dimension");
      if (dy_col[c - 1] >= 0) throw SchemaError("duplicate column dy" + std::to_string(c));
      dy_col[c - 1] = j;
    }
  }
  const std::size_t ncols = header.size();
  std::vector<Vec> xrows;
  std::vector<double> yvals;
  std::vector<Vec> dyrows;
  std::vector<std::vector<bool>> maskrows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    auto cells = detail::split_csv_line(line);
    if (cells.size() != ncols) {
      throw ParseError(line_no, "expected " + std::to_string(ncols) + " cells, got " +
                                    std::to_string(cells.size()));
    }
    Vec x(D), dy = Vec::Zero(D);
    std::vector<bool> m(D, false);
    for (int d = 0; d < D; ++d) x(d) = detail::parse_real(cells[x_col[d]], line_no);
    yvals.push_back(detail::parse_real(cells[y_col], line_no));
    for (int d = 0; d < D; ++d) {
      if (dy_col[d] < 0) continue;
      const std::string& tok = cells[dy_col[d]];
      if (tok.empty()) continue;  // unobserved partial
      dy(d) = detail::parse_real(tok, line_no);
      m[d] = true;
    }
    xrows.push_back(std::move(x));
    dyrows.push_back(std::move(dy));
    maskrows.push_back(std::move(m));
  }
  const Eigen::Index N = static_cast<Eigen::Index>(yvals.size());
  if (N == 0) throw SchemaError("no data rows in '" + path + "'");
  Mat X(N, D), dY(N, D);
  Vec y(N);
  BoolArray mask(N, D);
  for (Eigen::Index i = 0; i < N; ++i) {
    X.row(i) = xrows[i];
    y(i) = yvals[i];
    dY.row(i) = dyrows[i];
    for (int d = 0; d < D; ++d) mask(i, d) = maskrows[i][d];
  }
  return standardize_raw(std::move(X), std::move(y), std::move(dY), std::move(mask));
}

// Emits raw-space values, 17 significant digits, same schema as load_csv.
inline void save_csv(const DerivativeDataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw SchemaError("cannot write '" + path + "'");
  const Eigen::Index D = ds.dim();
  for (Eigen::Index d = 0; d < D; ++d) out << "x" << (d + 1) << ",";
  out << "y";
  if (ds.has_gradients()) {
    for (Eigen::Index d = 0; d < D; ++d) out << ",dy" << (d + 1);
  }
  out << "\n";
  char buf[64];
  auto emit = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    out << buf;
  };
  for (Eigen::Index i = 0; i < ds.n(); ++i) {
    for (Eigen::Index d = 0; d < D; ++d) {
      emit(ds.X(i, d) * ds.std_.x_scale(d) + ds.std_.x_shift(d));
      out << ",";
    }
    emit(ds.raw_y(i));
    if (ds.has_gradients()) {
      for (Eigen::Index d = 0; d < D; ++d) {
        out << ",";
        if (ds.mask(i, d)) emit(ds.raw_dy(i, d));
      }
    }
    out << "\n";
  }
}

// --- active subspace --------------------------------------------------------

// Top-k eigenvectors of P = sum_i g_i g_i^T over standardized gradients, with
// a deterministic sign convention, plus the projected dataset
// (P_k^T x, y, P_k^T g). The projected inputs keep identity standardization
// so isotropic-kernel models see a pure rotation at k = D.
inline std::pair<Mat, DerivativeDataset> active_subspace(const DerivativeDataset& ds, int k) {
  if (!ds.has_gradients() || !ds.mask.all()) {
    throw MissingGradients("active_subspace needs fully observed gradients");
  }
  const int D = static_cast<int>(ds.dim());
  if (k < 1 || k > D) throw InvalidK(std::to_string(k) + " not in [1, " + std::to_string(D) + "]");
  Mat P = ds.dY.transpose() * ds.dY;
  Eigen::SelfAdjointEigenSolver<Mat> eig(P);
  if (eig.info() != Eigen::Success) throw Error("eigendecomposition failed");
  Mat Pk(D, k);
  for (int j = 0; j < k; ++j) {
    Vec v = eig.eigenvectors().col(D - 1 - j);  // descending eigenvalue order
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0.0) v = -v;
    Pk.col(j) = v;
  }
  DerivativeDataset out;
  out.X = ds.X * Pk;
  out.y = ds.y;
  out.dY = ds.dY * Pk;
  out.mask = BoolArray::Constant(ds.n(), k, true);
  out.std_ = Standardization::identity(k);
  out.std_.y_shift = ds.std_.y_shift;
  out.std_.y_scale = ds.std_.y_scale;
  return {Pk, out};
}

}  // namespace gpdd
