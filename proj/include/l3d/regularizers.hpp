#pragma once

#include "l3d/geometry.hpp"

#include <Eigen/Dense>

namespace l3d {

/// Weights for the row differences (N-1 x N) and column differences (N x N-1).
struct TvWeights {
  Eigen::MatrixXd w_r;
  Eigen::MatrixXd w_c;
  double sigma = 1e-6;
};

/// Auxiliary variables and Bregman multipliers for the TV-l1 split.
struct SplitState {
  Eigen::MatrixXd d_r, d_c;
  Eigen::MatrixXd b_r, b_c;
  double mu = 1.0;

  static SplitState zeros(int n, double mu);
};

struct ValueGrad {
  double value = 0.0;
  Eigen::MatrixXd grad;
};

/// alpha(i, j) - alpha(i + 1, j)
Eigen::MatrixXd grad_r(const Eigen::MatrixXd& alpha);
/// alpha(i, j) - alpha(i, j + 1)
Eigen::MatrixXd grad_c(const Eigen::MatrixXd& alpha);
/// Transposes of grad_r and grad_c.
Eigen::MatrixXd grad_r_adjoint(const Eigen::MatrixXd& d);
Eigen::MatrixXd grad_c_adjoint(const Eigen::MatrixXd& d);

/// ||grad_r a||^2 + ||grad_c a||^2 and its gradient.
ValueGrad tv2_value_grad(const Eigen::MatrixXd& alpha);

/// exp(-diff^2 / sigma) for every row and column difference.
TvWeights compute_weights(const Eigen::MatrixXd& alpha, double sigma);

/// sum W_r (grad_r a)^2 + W_c (grad_c a)^2 with the weights held fixed.
ValueGrad wtv2_value_grad(const Eigen::MatrixXd& alpha, const TvWeights& w);

/// sum sigma (1 - exp(-diff^2 / sigma)) over all differences.
///
/// Quadratic penalties with weights from compute_weights(alpha_k) majorize
/// this function and touch it at alpha_k, so reweighting once per outer
/// iteration and descending the weighted problem never increases it.
double wtv2_potential(const Eigen::MatrixXd& alpha, double sigma);

/// ||grad_r a||_1 + ||grad_c a||_1 (anisotropic).
double tv1_value(const Eigen::MatrixXd& alpha);

/// sign(x) max(|x| - t, 0), entrywise. Throws ConfigError for t < 0.
Eigen::MatrixXd shrink(const Eigen::MatrixXd& x, double t);

/// (mu / 2) (||grad_r a - d_r + b_r||^2 + ||grad_c a - d_c + b_c||^2) and gradient.
ValueGrad split_coupling_value_grad(const Eigen::MatrixXd& alpha, const SplitState& st);

/// d <- shrink(grad a + b, lambda / mu); b <- b + grad a - d.
void bregman_update(const Eigen::MatrixXd& alpha, double lambda, SplitState& st);

/// ||grad a - d|| over both directions.
double split_constraint_residual(const Eigen::MatrixXd& alpha, const SplitState& st);

}  // namespace l3d
