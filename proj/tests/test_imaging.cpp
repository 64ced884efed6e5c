#include "l3d/imaging.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace l3d;

TEST_CASE("forward matches entrywise evaluation") {
  std::mt19937_64 rng(11);
  for (auto [m, n] : {std::pair{32, 8}, std::pair{48, 16}}) {
    CAPTURE(n);
    const CameraGeometry g = oracle::small_geometry(m, n);
    const MaskProfile mask = oracle::small_mask();
    const ForwardModel model(mask, g);
    const Scene s = oracle::random_scene(n, rng);
    const Eigen::MatrixXd y = model.forward(s);
    const Eigen::MatrixXd ref = oracle::brute_forward(mask, g, s);
    CHECK((y - ref).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("basis is the outer product of the 1-D shadows") {
  const CameraGeometry g = oracle::small_geometry(33, 3);
  const MaskProfile mask = oracle::small_mask();
  const ForwardModel model(mask, g);
  const Eigen::MatrixXd b = model.basis_2d(0, 2, 0.993);
  const Eigen::VectorXd p0 = model.psi(0, 0.993), p2 = model.psi(2, 0.993);
  CHECK((b - p0 * p2.transpose()).cwiseAbs().maxCoeff() == 0.0);
  const Eigen::MatrixXd c = model.basis_2d(1, 1, 1.0);
  CHECK(c(16, 16) == doctest::Approx(mask.value(0.0) * mask.value(0.0)));
}

TEST_CASE("single point source and zero scene") {
  const int n = 8;
  const CameraGeometry g = oracle::small_geometry(32, n);
  const ForwardModel model(oracle::small_mask(), g);
  Scene s;
  s.intensity = Eigen::MatrixXd::Zero(n, n);
  s.inv_depth = Eigen::MatrixXd::Constant(n, n, 0.99);
  CHECK(model.forward(s).cwiseAbs().maxCoeff() == 0.0);
  s.inv_depth(2, 5) = 0.995;
  s.intensity(2, 5) = 0.7;
  const Eigen::MatrixXd y = model.forward(s);
  CHECK((y - 0.7 * model.basis_2d(2, 5, 0.995)).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("adjoint identity") {
  std::mt19937_64 rng(5);
  const int n = 8, m = 32;
  const ForwardModel model(oracle::small_mask(), oracle::small_geometry(m, n));
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    Scene s = oracle::random_scene(n, rng);
    s.intensity = oracle::random_matrix(n, n, rng);
    const Eigen::MatrixXd r = oracle::random_matrix(m, m, rng);
    const double lhs = (model.forward(s).array() * r.array()).sum();
    const double rhs = (s.intensity.array() * model.adjoint(s.inv_depth, r).array()).sum();
    worst = std::max(worst, std::abs(lhs - rhs) / (s.intensity.norm() * r.norm()));
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("adjoint of a basis image") {
  const int n = 8;
  const ForwardModel model(oracle::small_mask(), oracle::small_geometry(32, n));
  const Eigen::MatrixXd a = Eigen::MatrixXd::Constant(n, n, 0.994);
  const Eigen::MatrixXd r = model.basis_2d(3, 6, 0.994);
  const Eigen::MatrixXd out = model.adjoint(a, r);
  const double expect = model.psi(3, 0.994).squaredNorm() * model.psi(6, 0.994).squaredNorm();
  CHECK(out(3, 6) == doctest::Approx(expect).epsilon(1e-12));
  CHECK(model.adjoint(a, Eigen::MatrixXd::Zero(32, 32)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("data loss") {
  std::mt19937_64 rng(9);
  const int n = 8;
  const ForwardModel model(oracle::small_mask(), oracle::small_geometry(32, n));
  const Scene s = oracle::random_scene(n, rng);
  const Eigen::MatrixXd y = model.forward(s);
  CHECK(model.data_loss(y, s) <= 1e-20 * y.squaredNorm());
  const Scene t = oracle::random_scene(n, rng);
  double half_sse = 0.0;
  const Eigen::MatrixXd yt = model.forward(t);
  for (int u = 0; u < 32; ++u)
    for (int v = 0; v < 32; ++v) half_sse += 0.5 * (y(u, v) - yt(u, v)) * (y(u, v) - yt(u, v));
  CHECK(model.data_loss(y, t) == doctest::Approx(half_sse).epsilon(1e-12));
  CHECK((model.residual(y, t) - (y - yt)).cwiseAbs().maxCoeff() < 1e-13);
}

TEST_CASE("depth gradient matches finite differences") {
  std::mt19937_64 rng(21);
  const int n = 8;
  const ForwardModel model(oracle::small_mask(), oracle::small_geometry(32, n));
  for (int trial = 0; trial < 5; ++trial) {
    const Scene truth = oracle::random_scene(n, rng);
    const Scene s = oracle::random_scene(n, rng);
    const Eigen::MatrixXd y = model.forward(truth);
    const Eigen::MatrixXd g = model.depth_gradient(y, s);
    const Eigen::MatrixXd fd = oracle::fd_depth_gradient(model, y, s, 1e-7);
    CHECK((g - fd).norm() / fd.norm() < 1e-4);
    Eigen::MatrixXd g2;
    const double loss = model.loss_and_depth_gradient(y, s, g2);
    CHECK(loss == doctest::Approx(model.data_loss(y, s)).epsilon(1e-12));
    CHECK((g2 - g).cwiseAbs().maxCoeff() <= 1e-12 * g.cwiseAbs().maxCoeff());
  }
}

TEST_CASE("depth gradient special cases") {
  std::mt19937_64 rng(3);
  const int n = 8;
  const ForwardModel model(oracle::small_mask(), oracle::small_geometry(32, n));
  Scene s = oracle::random_scene(n, rng);
  const Eigen::MatrixXd y = model.forward(s);
  CHECK(model.depth_gradient(y, s).cwiseAbs().maxCoeff() == 0.0);
  const Scene truth = oracle::random_scene(n, rng);
  s.intensity(4, 1) = 0.0;
  const Eigen::MatrixXd g = model.depth_gradient(model.forward(truth), s);
  CHECK(g(4, 1) == 0.0);
  CHECK(g.cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("plane operator agrees with the general model") {
  std::mt19937_64 rng(8);
  const int n = 8;
  const ForwardModel model(oracle::small_mask(), oracle::small_geometry(32, n));
  Scene s = oracle::random_scene(n, rng);
  s.inv_depth.setConstant(0.992);
  const Eigen::MatrixXd b = model.plane_basis(0.992);
  REQUIRE(b.rows() == 32);
  REQUIRE(b.cols() == n);
  CHECK((plane_forward(b, s.intensity) - model.forward(s)).cwiseAbs().maxCoeff() < 1e-12);
  const Eigen::MatrixXd r = oracle::random_matrix(32, 32, rng);
  CHECK((plane_adjoint(b, r) - model.adjoint(s.inv_depth, r)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("threaded and serial kernels agree") {
  std::mt19937_64 rng(4);
  const int n = 16;
  const CameraGeometry g = oracle::small_geometry(48, n);
  const ForwardModel par(oracle::small_mask(), g, ExecPolicy{4, false});
  const ForwardModel ser(oracle::small_mask(), g, ExecPolicy{1, true});
  const Scene s = oracle::random_scene(n, rng);
  const Scene t = oracle::random_scene(n, rng);
  const Eigen::MatrixXd y = ser.forward(t);
  CHECK((par.forward(s) - ser.forward(s)).cwiseAbs().maxCoeff() < 1e-12);
  const Eigen::MatrixXd gp = par.depth_gradient(y, s), gs = ser.depth_gradient(y, s);
  CHECK((gp - gs).cwiseAbs().maxCoeff() <= 1e-12 * gs.cwiseAbs().maxCoeff());
  // The serial path is reproducible bit for bit.
  CHECK((ser.forward(s).array() == ser.forward(s).array()).all());
}

TEST_CASE("simulate") {
  std::mt19937_64 rng(2);
  const int n = 8;
  const ForwardModel model(oracle::small_mask(), oracle::small_geometry(64, n));
  const Scene s = oracle::random_scene(n, rng);
  const Eigen::MatrixXd clean = model.forward(s);

  const Measurement quiet = model.simulate(s, std::nullopt, 1);
  CHECK(!quiet.meta.snr_db);
  CHECK((quiet.y.array() == clean.array()).all());

  const Measurement a = model.simulate(s, 30.0, 42);
  const Measurement b = model.simulate(s, 30.0, 42);
  const Measurement c = model.simulate(s, 30.0, 43);
  CHECK((a.y.array() == b.y.array()).all());
  CHECK((a.y - c.y).cwiseAbs().maxCoeff() > 0.0);
  CHECK(a.meta.seed == 42);

  for (double snr : {20.0, 30.0, 40.0}) {
    const Measurement mm = model.simulate(s, snr, 7);
    const double measured = 20.0 * std::log10(clean.norm() / (mm.y - clean).norm());
    CHECK(std::abs(measured - snr) < 0.2);
  }
}

TEST_CASE("dimension checks") {
  const ForwardModel model(oracle::small_mask(), oracle::small_geometry(32, 8));
  Scene s;
  s.intensity = Eigen::MatrixXd::Ones(7, 7);
  s.inv_depth = Eigen::MatrixXd::Constant(7, 7, 0.99);
  CHECK_THROWS(model.forward(s));
  s.intensity = Eigen::MatrixXd::Ones(8, 8);
  s.inv_depth = Eigen::MatrixXd::Constant(8, 8, 1.5);
  CHECK_THROWS(s.validate(8));
}
