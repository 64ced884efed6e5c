#include "l3d/regularizers.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace l3d;

TEST_CASE("finite differences") {
  Eigen::MatrixXd a = Eigen::MatrixXd::Constant(4, 5, 0.3);
  CHECK(grad_r(a).cwiseAbs().maxCoeff() == 0.0);
  CHECK(grad_c(a).cwiseAbs().maxCoeff() == 0.0);
  CHECK(grad_r(a).rows() == 3);
  CHECK(grad_c(a).cols() == 4);
  for (int i = 0; i < 4; ++i) a.row(i).setConstant(0.25 * i);
  const Eigen::MatrixXd dr = grad_r(a);
  CHECK((dr.array() == -0.25).all());
  CHECK(grad_c(a).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("difference adjoints") {
  std::mt19937_64 rng(1);
  const Eigen::MatrixXd a = oracle::random_matrix(6, 6, rng);
  const Eigen::MatrixXd pr = oracle::random_matrix(5, 6, rng);
  const Eigen::MatrixXd pc = oracle::random_matrix(6, 5, rng);
  CHECK((grad_r(a).array() * pr.array()).sum() ==
        doctest::Approx((a.array() * grad_r_adjoint(pr).array()).sum()).epsilon(1e-13));
  CHECK((grad_c(a).array() * pc.array()).sum() ==
        doctest::Approx((a.array() * grad_c_adjoint(pc).array()).sum()).epsilon(1e-13));
}

TEST_CASE("tv2 values") {
  const ValueGrad flat = tv2_value_grad(Eigen::MatrixXd::Constant(3, 3, 0.9));
  CHECK(flat.value == 0.0);
  CHECK(flat.grad.cwiseAbs().maxCoeff() == 0.0);
  Eigen::MatrixXd a(2, 2);
  a << 0, 1, 0, 1;
  CHECK(tv2_value_grad(a).value == 2.0);
}

TEST_CASE("tv2 gradient") {
  std::mt19937_64 rng(2);
  const Eigen::MatrixXd a = oracle::random_matrix(5, 5, rng);
  const ValueGrad vg = tv2_value_grad(a);
  const double h = 1e-6;
  for (int j = 0; j < 5; ++j)
    for (int i = 0; i < 5; ++i) {
      Eigen::MatrixXd p = a, m = a;
      p(i, j) += h;
      m(i, j) -= h;
      const double fd = (tv2_value_grad(p).value - tv2_value_grad(m).value) / (2 * h);
      CHECK(vg.grad(i, j) == doctest::Approx(fd).epsilon(1e-7));
    }
}

TEST_CASE("weights") {
  Eigen::MatrixXd a = Eigen::MatrixXd::Constant(3, 3, 0.5);
  TvWeights w = compute_weights(a, 1e-4);
  CHECK((w.w_r.array() == 1.0).all());
  CHECK((w.w_c.array() == 1.0).all());
  a(0, 0) = 0.5 + 1e-2;  // difference^2 = sigma
  w = compute_weights(a, 1e-4);
  CHECK(w.w_r(0, 0) == doctest::Approx(0.36788).epsilon(1e-5));
  CHECK(w.w_c(0, 0) == doctest::Approx(std::exp(-1.0)).epsilon(1e-12));
  CHECK(w.w_r(1, 1) == 1.0);
  CHECK_THROWS_AS(compute_weights(a, 0.0), ConfigError);
  CHECK_THROWS_AS(compute_weights(a, -1.0), ConfigError);
}

TEST_CASE("weighted tv2 reductions") {
  std::mt19937_64 rng(3);
  const Eigen::MatrixXd a = oracle::random_matrix(5, 5, rng);
  TvWeights ones{Eigen::MatrixXd::Ones(4, 5), Eigen::MatrixXd::Ones(5, 4), 1.0};
  const ValueGrad w = wtv2_value_grad(a, ones);
  const ValueGrad t = tv2_value_grad(a);
  CHECK(w.value == doctest::Approx(t.value).epsilon(1e-14));
  CHECK((w.grad - t.grad).cwiseAbs().maxCoeff() < 1e-13);
  TvWeights zeros{Eigen::MatrixXd::Zero(4, 5), Eigen::MatrixXd::Zero(5, 4), 1.0};
  const ValueGrad z = wtv2_value_grad(a, zeros);
  CHECK(z.value == 0.0);
  CHECK(z.grad.cwiseAbs().maxCoeff() == 0.0);
  TvWeights bad{Eigen::MatrixXd::Ones(3, 5), Eigen::MatrixXd::Ones(5, 4), 1.0};
  CHECK_THROWS(wtv2_value_grad(a, bad));
}

TEST_CASE("weighted penalty discounts large steps") {
  // One row of size 1 step among 4 columns: TV-l2 pays 4 s^2, the weighted
  // potential saturates at 4 sigma.
  const double sigma = 1e-4, s = 0.1;
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(4, 4);
  a.bottomRows(2).setConstant(s);
  const double tv2 = tv2_value_grad(a).value;
  CHECK(tv2 == doctest::Approx(4 * s * s));
  CHECK(wtv2_potential(a, sigma) == doctest::Approx(4 * sigma * (1 - std::exp(-s * s / sigma))));
  const TvWeights w = compute_weights(a, sigma);
  CHECK(wtv2_value_grad(a, w).value == doctest::Approx(4 * s * s * std::exp(-s * s / sigma)));
  CHECK(wtv2_value_grad(a, w).value < 1e-30);
}

TEST_CASE("weighted quadratic majorizes the potential") {
  std::mt19937_64 rng(4);
  const double sigma = 0.5;
  const Eigen::MatrixXd ak = oracle::random_matrix(6, 6, rng);
  const TvWeights w = compute_weights(ak, sigma);
  const double phik = wtv2_potential(ak, sigma);
  const double qk = wtv2_value_grad(ak, w).value;
  for (int t = 0; t < 20; ++t) {
    const Eigen::MatrixXd a = ak + 0.5 * oracle::random_matrix(6, 6, rng);
    const double bound = phik + wtv2_value_grad(a, w).value - qk;
    CHECK(wtv2_potential(a, sigma) <= bound + 1e-12);
  }
}

TEST_CASE("tv1 values") {
  CHECK(tv1_value(Eigen::MatrixXd::Constant(4, 4, 0.2)) == 0.0);
  // A unit step between two rows of a 4-column map crosses 4 columns.
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(3, 4);
  a.row(2).setOnes();
  CHECK(tv1_value(a) == 4.0);
}

TEST_CASE("shrink") {
  Eigen::MatrixXd x(1, 5);
  x << 3.0, -3.0, 0.5, -1.0, 1.5;
  const Eigen::MatrixXd s = shrink(x, 1.0);
  CHECK(s(0, 0) == 2.0);
  CHECK(s(0, 1) == -2.0);
  CHECK(s(0, 2) == 0.0);
  CHECK(s(0, 3) == 0.0);
  CHECK(s(0, 4) == 0.5);
  CHECK((shrink(x, 0.0).array() == x.array()).all());
  CHECK_THROWS_AS(shrink(x, -0.1), ConfigError);
}

TEST_CASE("bregman update") {
  Eigen::MatrixXd a(2, 2);
  a << 0.0, 3.0, 1.0, 3.0;
  SplitState st = SplitState::zeros(2, 2.0);
  CHECK(split_coupling_value_grad(a, st).value ==
        doctest::Approx(0.5 * 2.0 * (grad_r(a).squaredNorm() + grad_c(a).squaredNorm())));
  bregman_update(a, 2.0, st);
  // threshold lambda / mu = 1; grad_r = [-1, 0], grad_c = [-3, -2]^T.
  CHECK(st.d_r(0, 0) == 0.0);
  CHECK(st.d_r(0, 1) == 0.0);
  CHECK(st.d_c(0, 0) == -2.0);
  CHECK(st.d_c(1, 0) == -1.0);
  CHECK(st.b_r(0, 0) == -1.0);
  CHECK(st.b_c(0, 0) == -1.0);
  CHECK(st.b_c(1, 0) == -1.0);
  CHECK(split_constraint_residual(a, st) == doctest::Approx(std::sqrt(3.0)));
}

TEST_CASE("split coupling gradient") {
  std::mt19937_64 rng(6);
  const Eigen::MatrixXd a = oracle::random_matrix(4, 4, rng);
  SplitState st = SplitState::zeros(4, 1.5);
  st.d_r = oracle::random_matrix(3, 4, rng);
  st.b_c = oracle::random_matrix(4, 3, rng);
  const ValueGrad vg = split_coupling_value_grad(a, st);
  const double h = 1e-6;
  for (int j = 0; j < 4; ++j)
    for (int i = 0; i < 4; ++i) {
      Eigen::MatrixXd p = a, m = a;
      p(i, j) += h;
      m(i, j) -= h;
      const double fd = (split_coupling_value_grad(p, st).value -
                         split_coupling_value_grad(m, st).value) / (2 * h);
      CHECK(vg.grad(i, j) == doctest::Approx(fd).epsilon(1e-7));
    }
}
