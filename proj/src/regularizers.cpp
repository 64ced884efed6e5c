#include "l3d/regularizers.hpp"

#include <cmath>

namespace l3d {

SplitState SplitState::zeros(int n, double mu) {
  if (!(mu > 0.0)) throw ConfigError("split-Bregman mu must be positive");
  SplitState st;
  st.d_r = Eigen::MatrixXd::Zero(n - 1, n);
  st.b_r = Eigen::MatrixXd::Zero(n - 1, n);
  st.d_c = Eigen::MatrixXd::Zero(n, n - 1);
  st.b_c = Eigen::MatrixXd::Zero(n, n - 1);
  st.mu = mu;
  return st;
}

Eigen::MatrixXd grad_r(const Eigen::MatrixXd& alpha) {
  const Eigen::Index n = alpha.rows();
  return alpha.topRows(n - 1) - alpha.bottomRows(n - 1);
}

Eigen::MatrixXd grad_c(const Eigen::MatrixXd& alpha) {
  const Eigen::Index n = alpha.cols();
  return alpha.leftCols(n - 1) - alpha.rightCols(n - 1);
}

Eigen::MatrixXd grad_r_adjoint(const Eigen::MatrixXd& d) {
  const Eigen::Index n = d.rows() + 1;
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, d.cols());
  out.topRows(n - 1) += d;
  out.bottomRows(n - 1) -= d;
  return out;
}

Eigen::MatrixXd grad_c_adjoint(const Eigen::MatrixXd& d) {
  const Eigen::Index n = d.cols() + 1;
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(d.rows(), n);
  out.leftCols(n - 1) += d;
  out.rightCols(n - 1) -= d;
  return out;
}

ValueGrad tv2_value_grad(const Eigen::MatrixXd& alpha) {
  const Eigen::MatrixXd dr = grad_r(alpha);
  const Eigen::MatrixXd dc = grad_c(alpha);
  return {dr.squaredNorm() + dc.squaredNorm(), 2.0 * (grad_r_adjoint(dr) + grad_c_adjoint(dc))};
}

TvWeights compute_weights(const Eigen::MatrixXd& alpha, double sigma) {
  if (!(sigma > 0.0)) throw ConfigError("TV weight scale sigma must be positive");
  TvWeights w;
  w.sigma = sigma;
  w.w_r = (-grad_r(alpha).array().square() / sigma).exp().matrix();
  w.w_c = (-grad_c(alpha).array().square() / sigma).exp().matrix();
  return w;
}

ValueGrad wtv2_value_grad(const Eigen::MatrixXd& alpha, const TvWeights& w) {
  const Eigen::MatrixXd dr = grad_r(alpha);
  const Eigen::MatrixXd dc = grad_c(alpha);
  if (w.w_r.rows() != dr.rows() || w.w_r.cols() != dr.cols() || w.w_c.rows() != dc.rows() ||
      w.w_c.cols() != dc.cols())
    throw ConfigError("TV weights do not match the inverse depth map shape");
  const Eigen::MatrixXd wdr = w.w_r.cwiseProduct(dr);
  const Eigen::MatrixXd wdc = w.w_c.cwiseProduct(dc);
  return {wdr.cwiseProduct(dr).sum() + wdc.cwiseProduct(dc).sum(),
          2.0 * (grad_r_adjoint(wdr) + grad_c_adjoint(wdc))};
}

double wtv2_potential(const Eigen::MatrixXd& alpha, double sigma) {
  if (!(sigma > 0.0)) throw ConfigError("TV weight scale sigma must be positive");
  auto rho = [sigma](const Eigen::MatrixXd& d) {
    // -expm1 keeps precision when diff^2 << sigma.
    return (-(-d.array().square() / sigma).unaryExpr([](double v) { return std::expm1(v); }) *
            sigma)
        .sum();
  };
  return rho(grad_r(alpha)) + rho(grad_c(alpha));
}

double tv1_value(const Eigen::MatrixXd& alpha) {
  return grad_r(alpha).cwiseAbs().sum() + grad_c(alpha).cwiseAbs().sum();
}

Eigen::MatrixXd shrink(const Eigen::MatrixXd& x, double t) {
  if (!(t >= 0.0)) throw ConfigError("shrink threshold must be non-negative");
  return x.unaryExpr([t](double v) {
    const double mag = std::abs(v) - t;
    return mag > 0.0 ? std::copysign(mag, v) : 0.0;
  });
}

ValueGrad split_coupling_value_grad(const Eigen::MatrixXd& alpha, const SplitState& st) {
  const Eigen::MatrixXd er = grad_r(alpha) - st.d_r + st.b_r;
  const Eigen::MatrixXd ec = grad_c(alpha) - st.d_c + st.b_c;
  return {0.5 * st.mu * (er.squaredNorm() + ec.squaredNorm()),
          st.mu * (grad_r_adjoint(er) + grad_c_adjoint(ec))};
}

void bregman_update(const Eigen::MatrixXd& alpha, double lambda, SplitState& st) {
  const Eigen::MatrixXd gr = grad_r(alpha);
  const Eigen::MatrixXd gc = grad_c(alpha);
  st.d_r = shrink(gr + st.b_r, lambda / st.mu);
  st.d_c = shrink(gc + st.b_c, lambda / st.mu);
  st.b_r += gr - st.d_r;
  st.b_c += gc - st.d_c;
}

double split_constraint_residual(const Eigen::MatrixXd& alpha, const SplitState& st) {
  return std::sqrt((grad_r(alpha) - st.d_r).squaredNorm() +
                   (grad_c(alpha) - st.d_c).squaredNorm());
}

}  // namespace l3d
