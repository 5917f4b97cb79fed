// Shared scalar/matrix aliases and small utilities used across the library.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>

namespace gpdd {

// Dense row-major 64-bit real matrix; the storage type for every kernel and
// covariance object in the library.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using Rng = std::mt19937_64;

// Numerically stable softplus and its inverse; used for positivity
// reparameterization of lengthscales, scales, noises and Cholesky diagonals.
inline double softplus(double x) {
  if (x > 30.0) return x;
  if (x < -30.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

inline double softplus_inv(double y) {
  // y > 0; returns x with softplus(x) = y.
  if (y > 30.0) return y;
  return std::log(std::expm1(y));
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace gpdd
