// Adam over a flat list of matrix-shaped parameters, with the two-drop
// step-size schedule used by every trainer in the library.
#pragma once

#include <vector>

#include "gpdd/common.hpp"
#include "gpdd/errors.hpp"

namespace gpdd {

struct AdamConfig {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Halves the learning rate at 50% and again at 75% of the step budget.
inline double multistep_scale(long step, long total) {
  if (total <= 0) return 1.0;
  double s = 1.0;
  if (2 * step >= total) s *= 0.5;
  if (4 * step >= 3 * total) s *= 0.5;
  return s;
}

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  // Parallel param/grad lists; shapes are fixed after the first call.
  // lr_scale multiplies the base step size for schedule support.
  void step(const std::vector<Mat*>& params, const std::vector<const Mat*>& grads,
            double lr_scale = 1.0) {
    if (params.size() != grads.size()) throw DimensionMismatch("Adam param/grad count");
    if (m_.empty()) {
      for (const Mat* p : params) {
        m_.push_back(Mat::Zero(p->rows(), p->cols()));
        v_.push_back(Mat::Zero(p->rows(), p->cols()));
      }
    }
    if (m_.size() != params.size()) throw DimensionMismatch("Adam slot count changed");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const double lr = cfg_.lr * lr_scale;
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Mat& g = *grads[i];
      if (g.rows() != m_[i].rows() || g.cols() != m_[i].cols()) {
        throw DimensionMismatch("Adam slot " + std::to_string(i) + " shape changed");
      }
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
      v_[i] = cfg_.beta2 * v_[i].array().matrix() + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
      *params[i] -= (lr * (m_[i] / bc1).array() / ((v_[i] / bc2).array().sqrt() + cfg_.eps))
                        .matrix();
    }
  }

  long steps_taken() const { return t_; }

 private:
  AdamConfig cfg_;
  long t_ = 0;
  std::vector<Mat> m_, v_;
};

}  // namespace gpdd
