// Reverse-mode differentiation over matrix-valued computations with a scalar
// output. A Tape records primitive applications append-only; backward() walks
// the record in reverse and accumulates adjoints into every influencing node.
// Scalars are represented as 1x1 matrices.
#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "gpdd/common.hpp"
#include "gpdd/errors.hpp"
#include "gpdd/linalg.hpp"

namespace gpdd::ad {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Tape {
 public:
  struct Node {
    Mat value;
    Mat grad;  // empty until touched during backward
    bool requires_grad = false;
    bool is_leaf = false;
    double aux = 0.0;  // per-node scalar stash (e.g. jitter used by cholesky)
    std::function<void(Tape&)> backward;
  };

  // --- node construction -------------------------------------------------

  Var constant(Mat v) { return push(std::move(v), false, false, {}); }

  Var constant_scalar(double v) {
    Mat m(1, 1);
    m(0, 0) = v;
    return constant(std::move(m));
  }

  // A trainable input; gradient() reports adjoints for these.
  Var leaf(Mat v) { return push(std::move(v), true, true, {}); }

  // Escape hatch for custom fused operations: the caller supplies the forward
  // value and a closure that routes adjoints from this node (passed as
  // `self`) to the inputs it captured.
  Var raw_node(Mat value, bool requires_grad, std::function<void(Tape&, int)> bw) {
    Var out = push(std::move(value), requires_grad, false, nullptr);
    if (requires_grad) {
      const int oid = out.id;
      nodes_[static_cast<std::size_t>(oid)].backward = [bw = std::move(bw), oid](Tape& t) {
        bw(t, oid);
      };
    }
    return out;
  }

  const Mat& value(Var v) const { return nodes_[check(v)].value; }
  const Mat& value_at(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(Var v) const { return nodes_[check(v)].requires_grad; }
  double aux(Var v) const { return nodes_[check(v)].aux; }
  std::size_t size() const { return nodes_.size(); }

  // Adjoint of a node after backward(); zeros if the node never influenced
  // the output.
  Mat grad(Var v) const {
    const Node& n = nodes_[check(v)];
    if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  // Accumulation target used by backward closures.
  Mat& grad_ref(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  bool grad_touched(int id) const { return nodes_[static_cast<std::size_t>(id)].grad.size() != 0; }

  // --- primitives ---------------------------------------------------------

  Var add(Var a, Var b) {
    same_shape(a, b, "add");
    Mat v = value(a) + value(b);
    return binary(std::move(v), a, b, [](Tape& t, int out, int ia, int ib) {
      const Mat& g = t.grad_ref(out);
      if (t.rg(ia)) t.grad_ref(ia) += g;
      if (t.rg(ib)) t.grad_ref(ib) += g;
    });
  }

  Var sub(Var a, Var b) {
    same_shape(a, b, "sub");
    Mat v = value(a) - value(b);
    return binary(std::move(v), a, b, [](Tape& t, int out, int ia, int ib) {
      const Mat& g = t.grad_ref(out);
      if (t.rg(ia)) t.grad_ref(ia) += g;
      if (t.rg(ib)) t.grad_ref(ib) -= g;
    });
  }

  Var neg(Var a) {
    return unary(Mat(-value(a)), a, [](Tape& t, int out, int ia) {
      t.grad_ref(ia) -= t.grad_ref(out);
    });
  }

  Var scale(Var a, double c) {
    return unary(Mat(value(a) * c), a, [c](Tape& t, int out, int ia) {
      t.grad_ref(ia) += c * t.grad_ref(out);
    });
  }

  Var hadamard(Var a, Var b) {
    same_shape(a, b, "hadamard");
    Mat v = value(a).cwiseProduct(value(b));
    return binary(std::move(v), a, b, [](Tape& t, int out, int ia, int ib) {
      const Mat& g = t.grad_ref(out);
      if (t.rg(ia)) t.grad_ref(ia) += g.cwiseProduct(t.nodes_[ib].value);
      if (t.rg(ib)) t.grad_ref(ib) += g.cwiseProduct(t.nodes_[ia].value);
    });
  }

  // Broadcast multiply by a 1x1 variable.
  Var mul_scalar(Var a, Var s) {
    scalar_shape(s, "mul_scalar");
    Mat v = value(a) * value(s)(0, 0);
    return binary(std::move(v), a, s, [](Tape& t, int out, int ia, int is) {
      const Mat& g = t.grad_ref(out);
      if (t.rg(ia)) t.grad_ref(ia) += g * t.nodes_[is].value(0, 0);
      if (t.rg(is)) t.grad_ref(is)(0, 0) += g.cwiseProduct(t.nodes_[ia].value).sum();
    });
  }

  Var matmul(Var a, Var b) {
    if (value(a).cols() != value(b).rows()) {
      throw DimensionMismatch("matmul inner dims " + shape(a) + " * " + shape(b));
    }
    Mat v = value(a) * value(b);
    return binary(std::move(v), a, b, [](Tape& t, int out, int ia, int ib) {
      const Mat& g = t.grad_ref(out);
      if (t.rg(ia)) t.grad_ref(ia).noalias() += g * t.nodes_[ib].value.transpose();
      if (t.rg(ib)) t.grad_ref(ib).noalias() += t.nodes_[ia].value.transpose() * g;
    });
  }

  // a^T * b without a transpose node.
  Var matmul_tn(Var a, Var b) {
    if (value(a).rows() != value(b).rows()) {
      throw DimensionMismatch("matmul_tn inner dims " + shape(a) + "^T * " + shape(b));
    }
    Mat v = value(a).transpose() * value(b);
    return binary(std::move(v), a, b, [](Tape& t, int out, int ia, int ib) {
      const Mat& g = t.grad_ref(out);
      if (t.rg(ia)) t.grad_ref(ia).noalias() += t.nodes_[ib].value * g.transpose();
      if (t.rg(ib)) t.grad_ref(ib).noalias() += t.nodes_[ia].value * g;
    });
  }

  // a * b^T without a transpose node.
  Var matmul_nt(Var a, Var b) {
    if (value(a).cols() != value(b).cols()) {
      throw DimensionMismatch("matmul_nt inner dims " + shape(a) + " * " + shape(b) + "^T");
    }
    Mat v = value(a) * value(b).transpose();
    return binary(std::move(v), a, b, [](Tape& t, int out, int ia, int ib) {
      const Mat& g = t.grad_ref(out);
      if (t.rg(ia)) t.grad_ref(ia).noalias() += g * t.nodes_[ib].value;
      if (t.rg(ib)) t.grad_ref(ib).noalias() += g.transpose() * t.nodes_[ia].value;
    });
  }

  Var transpose(Var a) {
    return unary(Mat(value(a).transpose()), a, [](Tape& t, int out, int ia) {
      t.grad_ref(ia) += t.grad_ref(out).transpose();
    });
  }

  Var exp_(Var a) {
    return unary(Mat(value(a).array().exp()), a, [](Tape& t, int out, int ia) {
      t.grad_ref(ia) += t.grad_ref(out).cwiseProduct(t.nodes_[out].value);
    });
  }

  Var log_(Var a) {
    return unary(Mat(value(a).array().log()), a, [](Tape& t, int out, int ia) {
      t.grad_ref(ia) += t.grad_ref(out).cwiseQuotient(t.nodes_[ia].value);
    });
  }

  Var softplus_(Var a) {
    Mat v = value(a).unaryExpr([](double x) { return softplus(x); });
    return unary(std::move(v), a, [](Tape& t, int out, int ia) {
      const Mat s = t.nodes_[ia].value.unaryExpr([](double x) { return sigmoid(x); });
      t.grad_ref(ia) += t.grad_ref(out).cwiseProduct(s);
    });
  }

  Var recip(Var a) {
    return unary(Mat(value(a).cwiseInverse()), a, [](Tape& t, int out, int ia) {
      const Mat& o = t.nodes_[out].value;
      t.grad_ref(ia) -= t.grad_ref(out).cwiseProduct(o).cwiseProduct(o);
    });
  }

  Var clamp_min(Var a, double floor) {
    Mat v = value(a).cwiseMax(floor);
    return unary(std::move(v), a, [floor](Tape& t, int out, int ia) {
      const Mat mask =
          (t.nodes_[ia].value.array() > floor).cast<double>().matrix();
      t.grad_ref(ia) += t.grad_ref(out).cwiseProduct(mask);
    });
  }

  Var sum(Var a) {
    Mat v(1, 1);
    v(0, 0) = value(a).sum();
    return unary(std::move(v), a, [](Tape& t, int out, int ia) {
      t.grad_ref(ia).array() += t.grad_ref(out)(0, 0);
    });
  }

  Var rowsum(Var a) {
    Mat v = value(a).rowwise().sum();
    return unary(std::move(v), a, [](Tape& t, int out, int ia) {
      t.grad_ref(ia).colwise() += t.grad_ref(out).col(0);
    });
  }

  Var trace(Var a) {
    square_shape(a, "trace");
    Mat v(1, 1);
    v(0, 0) = value(a).trace();
    return unary(std::move(v), a, [](Tape& t, int out, int ia) {
      t.grad_ref(ia).diagonal().array() += t.grad_ref(out)(0, 0);
    });
  }

  // n x n -> n x 1 diagonal extraction.
  Var diag_part(Var a) {
    square_shape(a, "diag_part");
    Mat v = value(a).diagonal();
    return unary(std::move(v), a, [](Tape& t, int out, int ia) {
      t.grad_ref(ia).diagonal() += t.grad_ref(out).col(0);
    });
  }

  // n x 1 -> n x n diagonal matrix.
  Var diag_embed(Var d) {
    if (value(d).cols() != 1) throw DimensionMismatch("diag_embed expects a column, got " + shape(d));
    const Eigen::Index n = value(d).rows();
    Mat v = Mat::Zero(n, n);
    v.diagonal() = value(d).col(0);
    return unary(std::move(v), d, [](Tape& t, int out, int id) {
      t.grad_ref(id).col(0) += t.grad_ref(out).diagonal();
    });
  }

  // A + diag(mask * s) for scalar s; mask selects which diagonal entries the
  // scalar reaches (avoids materializing a dense diagonal constant).
  Var add_diag(Var a, Var s, const Vec& mask) {
    square_shape(a, "add_diag");
    scalar_shape(s, "add_diag");
    if (mask.size() != value(a).rows()) {
      throw DimensionMismatch("add_diag mask of size " + std::to_string(mask.size()) + " on " +
                              shape(a));
    }
    Mat v = value(a);
    v.diagonal() += mask * value(s)(0, 0);
    return binary(std::move(v), a, s, [mask](Tape& t, int out, int ia, int is) {
      if (t.rg(ia)) t.grad_ref(ia) += t.grad_ref(out);
      if (t.rg(is)) t.grad_ref(is)(0, 0) += t.grad_ref(out).diagonal().dot(mask);
    });
  }

  // Lower Cholesky factor of (symmetrized A) + jitter*I with the shared
  // escalation policy. The forward symmetrizes so that finite-difference
  // perturbations of either triangle move the output consistently; the
  // adjoint is reported in symmetrized convention.
  Var cholesky(Var a, double base_jitter = -1.0) {
    square_shape(a, "cholesky");
    Mat sym = 0.5 * (value(a) + value(a).transpose());
    CholeskyFactor f = cholesky_with_jitter(sym, base_jitter);
    Var out = unary(std::move(f.lower), a, [](Tape& t, int out_, int ia) {
      const Mat& L = t.nodes_[out_].value;
      Mat Lbar = t.grad_ref(out_).template triangularView<Eigen::Lower>();
      Mat P = L.transpose() * Lbar;
      Mat Phi = P.template triangularView<Eigen::Lower>();
      Phi.diagonal() *= 0.5;
      // S = L^-T Phi L^-1 via two triangular solves.
      Mat tmp = L.transpose().template triangularView<Eigen::Upper>().solve(Phi);
      Mat S = L.transpose()
                  .template triangularView<Eigen::Upper>()
                  .solve(tmp.transpose())
                  .transpose();
      Mat Ssym = 0.5 * (S + S.transpose());
      // The factored matrix is A + jitter*I with jitter proportional to
      // mean(diag A), so the jitter itself moves with the input: each
      // diagonal entry picks up (jitter/tr A) * tr(adjoint).
      const double tr_a = t.nodes_[ia].value.trace();
      if (tr_a != 0.0) {
        const double str = Ssym.trace();
        Ssym.diagonal().array() += t.nodes_[out_].aux / tr_a * str;
      }
      t.grad_ref(ia) += Ssym;
    });
    nodes_[static_cast<std::size_t>(out.id)].aux = f.jitter_used;
    return out;
  }

  // X with op(L) X = B, op = L or L^T; L lower-triangular (a cholesky node).
  Var tri_solve(Var l, Var b, bool transpose_l = false) {
    if (value(l).rows() != value(b).rows() || value(l).rows() != value(l).cols()) {
      throw DimensionMismatch("tri_solve " + shape(l) + " \\ " + shape(b));
    }
    Mat v = transpose_l
                ? Mat(value(l).transpose().triangularView<Eigen::Upper>().solve(value(b)))
                : Mat(value(l).triangularView<Eigen::Lower>().solve(value(b)));
    return binary(std::move(v), l, b, [transpose_l](Tape& t, int out, int il, int ib) {
      const Mat& L = t.nodes_[il].value;
      const Mat& X = t.nodes_[out].value;
      const Mat& Xbar = t.grad_ref(out);
      if (!transpose_l) {
        // X = L^-1 B: Bbar = L^-T Xbar, Lbar -= tril(Bbar X^T)
        Mat Bbar = L.transpose().template triangularView<Eigen::Upper>().solve(Xbar);
        if (t.rg(ib)) t.grad_ref(ib) += Bbar;
        if (t.rg(il)) {
          Mat Lbar = -(Bbar * X.transpose());
          t.grad_ref(il) += Lbar.template triangularView<Eigen::Lower>();
        }
      } else {
        // X = L^-T B: Bbar = L^-1 Xbar, Lbar -= tril(X Bbar^T)
        Mat Bbar = L.template triangularView<Eigen::Lower>().solve(Xbar);
        if (t.rg(ib)) t.grad_ref(ib) += Bbar;
        if (t.rg(il)) {
          Mat Lbar = -(X * Bbar.transpose());
          t.grad_ref(il) += Lbar.template triangularView<Eigen::Lower>();
        }
      }
    });
  }

  // 2*sum(log diag L) = log|L L^T| for a Cholesky-factor input.
  Var log_det(Var l) {
    square_shape(l, "log_det");
    Mat v(1, 1);
    v(0, 0) = 2.0 * value(l).diagonal().array().log().sum();
    return unary(std::move(v), l, [](Tape& t, int out, int il) {
      const double g = t.grad_ref(out)(0, 0);
      t.grad_ref(il).diagonal().array() +=
          2.0 * g / t.nodes_[il].value.diagonal().array();
    });
  }

  // Row-wise quadratic form q_i = k_i Q k_i^T as a single node. Pre: the
  // value of Q is symmetric (the K adjoint reuses the forward product K*Q,
  // which stands in for K*(Q+Q^T)/2 only then). The Q adjoint K^T diag(g) K
  // is exact for any Q and is accumulated with sign-split rank updates at
  // half the flops of a dense product.
  Var row_quadratic_sym(Var k, Var q) {
    if (value(q).rows() != value(q).cols() || value(k).cols() != value(q).rows()) {
      throw DimensionMismatch("row_quadratic_sym " + shape(k) + " * " + shape(q));
    }
    auto P = std::make_shared<Mat>((value(k) * value(q)).eval());
    Mat v = P->cwiseProduct(value(k)).rowwise().sum();
    const int ik = k.id, iq = q.id;
    const bool req = requires_grad(k) || requires_grad(q);
    return raw_node(std::move(v), req, [P, ik, iq](Tape& t, int self) {
      const auto g = t.grad_ref(self).col(0).array();
      const Mat& K = t.value_at(ik);
      const Eigen::Index B = K.rows(), R = K.cols();
      if (t.rg(ik)) {
        t.grad_ref(ik).array() += 2.0 * (P->array().colwise() * g);
      }
      if (t.rg(iq)) {
        Mat S = Mat::Zero(R, R);
        if ((g <= 0.0).all()) {
          Mat Kn = K.array().colwise() * (-g).sqrt();
          S.selfadjointView<Eigen::Lower>().rankUpdate(Kn.transpose(), -1.0);
        } else if ((g >= 0.0).all()) {
          Mat Kp = K.array().colwise() * g.sqrt();
          S.selfadjointView<Eigen::Lower>().rankUpdate(Kp.transpose(), 1.0);
        } else {
          // Mixed signs: split the rows by sign, scaled by sqrt|g|. The
          // gather runs column by column so both source and destinations
          // stream through column-major storage.
          Eigen::Index np = 0;
          std::vector<Eigen::Index> dest(static_cast<size_t>(B));
          for (Eigen::Index i = 0; i < B; ++i)
            if (g(i) > 0.0) dest[static_cast<size_t>(i)] = np++;
          Eigen::Index nn = 0;
          for (Eigen::Index i = 0; i < B; ++i)
            if (g(i) <= 0.0) dest[static_cast<size_t>(i)] = nn++;
          const Eigen::ArrayXd s = g.abs().sqrt();
          Mat Kp(np, R), Kn(B - np, R);
          for (Eigen::Index j = 0; j < R; ++j) {
            const double* src = &K(0, j);
            double* dp = Kp.size() > 0 ? &Kp(0, j) : nullptr;
            double* dn = Kn.size() > 0 ? &Kn(0, j) : nullptr;
            for (Eigen::Index i = 0; i < B; ++i) {
              (g(i) > 0.0 ? dp : dn)[dest[static_cast<size_t>(i)]] = s(i) * src[i];
            }
          }
          if (np > 0) S.selfadjointView<Eigen::Lower>().rankUpdate(Kp.transpose(), 1.0);
          if (B - np > 0) S.selfadjointView<Eigen::Lower>().rankUpdate(Kn.transpose(), -1.0);
        }
        t.grad_ref(iq) += Mat(S.selfadjointView<Eigen::Lower>());
      }
    });
  }

  // x^T A x for a column vector x; A treated as-is (no symmetry assumption).
  Var quad_form(Var a, Var x) {
    if (value(x).cols() != 1 || value(a).rows() != value(a).cols() ||
        value(a).cols() != value(x).rows()) {
      throw DimensionMismatch("quad_form " + shape(x) + "^T * " + shape(a) + " * " + shape(x));
    }
    Mat v(1, 1);
    v(0, 0) = (value(x).transpose() * value(a) * value(x))(0, 0);
    return binary(std::move(v), a, x, [](Tape& t, int out, int ia, int ix) {
      const double g = t.grad_ref(out)(0, 0);
      const Mat& A = t.nodes_[ia].value;
      const Mat& X = t.nodes_[ix].value;
      if (t.rg(ia)) t.grad_ref(ia).noalias() += g * (X * X.transpose());
      if (t.rg(ix)) t.grad_ref(ix).noalias() += g * ((A + A.transpose()) * X);
    });
  }

  // --- backward -----------------------------------------------------------

  void backward(Var out) {
    const std::size_t oid = check(out);
    const Node& onode = nodes_[oid];
    if (onode.value.rows() != 1 || onode.value.cols() != 1) {
      throw NonScalarOutput("output has shape " + shape(out));
    }
    for (Node& n : nodes_) n.grad.resize(0, 0);
    grad_ref(static_cast<int>(oid))(0, 0) = 1.0;
    for (std::size_t i = oid + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && n.requires_grad && n.grad.size() != 0) n.backward(*this);
    }
  }

  // Runs backward and returns adjoints for every leaf (zero when the leaf
  // does not influence the output).
  std::unordered_map<int, Mat> gradient(Var out) {
    backward(out);
    std::unordered_map<int, Mat> g;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].is_leaf) g.emplace(static_cast<int>(i), grad(Var{static_cast<int>(i)}));
    }
    return g;
  }

  bool rg(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

 private:
  std::vector<Node> nodes_;

  std::size_t check(Var v) const {
    if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size()) {
      throw Error("variable id " + std::to_string(v.id) + " not on this tape");
    }
    return static_cast<std::size_t>(v.id);
  }

  std::string shape(Var v) const {
    return std::to_string(value(v).rows()) + "x" + std::to_string(value(v).cols());
  }

  void same_shape(Var a, Var b, const char* op) const {
    if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols()) {
      throw DimensionMismatch(std::string(op) + " " + shape(a) + " vs " + shape(b));
    }
  }

  void square_shape(Var a, const char* op) const {
    if (value(a).rows() != value(a).cols()) {
      throw DimensionMismatch(std::string(op) + " needs square, got " + shape(a));
    }
  }

  void scalar_shape(Var a, const char* op) const {
    if (value(a).rows() != 1 || value(a).cols() != 1) {
      throw DimensionMismatch(std::string(op) + " needs 1x1, got " + shape(a));
    }
  }

  Var push(Mat v, bool needs_grad, bool leaf, std::function<void(Tape&)> bw) {
    Node n;
    n.value = std::move(v);
    n.requires_grad = needs_grad;
    n.is_leaf = leaf;
    n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size() - 1)};
  }

  Var unary(Mat v, Var a, std::function<void(Tape&, int, int)> bw) {
    const bool req = requires_grad(a);
    const int ia = a.id;
    Var out = push(std::move(v), req, false, nullptr);
    if (req) {
      const int oid = out.id;
      nodes_[static_cast<std::size_t>(oid)].backward = [bw = std::move(bw), oid, ia](Tape& t) {
        bw(t, oid, ia);
      };
    }
    return out;
  }

  Var binary(Mat v, Var a, Var b, std::function<void(Tape&, int, int, int)> bw) {
    const bool req = requires_grad(a) || requires_grad(b);
    const int ia = a.id, ib = b.id;
    Var out = push(std::move(v), req, false, nullptr);
    if (req) {
      const int oid = out.id;
      nodes_[static_cast<std::size_t>(oid)].backward =
          [bw = std::move(bw), oid, ia, ib](Tape& t) { bw(t, oid, ia, ib); };
    }
    return out;
  }
};

// Compares the reverse-mode gradient of a rebuilt scalar computation against
// central finite differences, coordinate by coordinate over every leaf entry.
// Returns the max relative error with denominator max(|analytic|, 1e-8).
inline double fd_check(const std::function<Var(Tape&, const std::vector<Mat>&)>& build,
                       const std::vector<Mat>& at, double h) {
  if (h <= 0.0) throw InvalidConfig("fd_check needs h > 0");
  // Analytic pass.
  std::vector<Mat> grads;
  {
    Tape tape;
    Var out = build(tape, at);
    tape.backward(out);
    // The builder is required to create leaves in order; recover them by
    // re-walking: we instead ask the builder to use tape.leaf for each entry
    // of `at` in order, so leaf ids are discoverable by value match. To keep
    // the contract simple the builder receives values and must call
    // tape.leaf(at[i]) as its first len(at) recordings.
    grads.reserve(at.size());
    for (std::size_t i = 0; i < at.size(); ++i) {
      grads.push_back(tape.grad(Var{static_cast<int>(i)}));
    }
  }
  auto eval = [&](const std::vector<Mat>& x) {
    Tape tape;
    Var out = build(tape, x);
    return tape.value(out)(0, 0);
  };
  double max_rel = 0.0;
  std::vector<Mat> pert = at;
  for (std::size_t i = 0; i < at.size(); ++i) {
    for (Eigen::Index r = 0; r < at[i].rows(); ++r) {
      for (Eigen::Index c = 0; c < at[i].cols(); ++c) {
        const double orig = at[i](r, c);
        pert[i](r, c) = orig + h;
        const double fp = eval(pert);
        pert[i](r, c) = orig - h;
        const double fm = eval(pert);
        pert[i](r, c) = orig;
        const double fd = (fp - fm) / (2.0 * h);
        const double ga = grads[i](r, c);
        const double rel = std::abs(fd - ga) / std::max(std::abs(ga), 1e-8);
        if (rel > max_rel) max_rel = rel;
      }
    }
  }
  return max_rel;
}

}  // namespace gpdd::ad
