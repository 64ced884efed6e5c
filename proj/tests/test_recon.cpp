#include "l3d/recon.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace l3d;

namespace {

const CandidateDepths kPlanes = CandidateDepths::uniform(0.95, 0.99, 5);

Scene plane_scene(int n, double alpha, std::mt19937_64& rng) {
  Scene s = oracle::random_scene(n, rng);
  s.inv_depth.setConstant(alpha);
  return s;
}

bool non_increasing(const std::vector<double>& h, double rel = 1e-12) {
  for (std::size_t k = 1; k < h.size(); ++k)
    if (h[k] > h[k - 1] + rel * std::abs(h[k - 1])) return false;
  return true;
}

}  // namespace

TEST_CASE("candidate depths") {
  const CandidateDepths c = CandidateDepths::parse("0.996:0.9976:15");
  REQUIRE(c.size() == 15);
  CHECK(c.alphas.front() == 0.996);
  CHECK(c.alphas.back() == doctest::Approx(0.9976).epsilon(1e-15));
  CHECK(c.alphas[1] - c.alphas[0] == doctest::Approx(0.0016 / 14));
  const CandidateDepths one = CandidateDepths::parse("0.99:0.99:1");
  REQUIRE(one.size() == 1);
  CHECK(one.alphas[0] == 0.99);
  CHECK_THROWS_AS(CandidateDepths::parse("0.99:0.98"), ConfigError);
  CHECK_THROWS_AS(CandidateDepths::parse("0.99:0.98:3"), ConfigError);
  CHECK_THROWS_AS(CandidateDepths::parse("0.9:1.1:3"), ConfigError);
  CHECK_THROWS_AS(CandidateDepths::parse("0.9:0.95:0"), ConfigError);
  CHECK_THROWS_AS(CandidateDepths::parse("x:0.95:2"), ConfigError);
}

TEST_CASE("config json") {
  ReconConfig c;
  c.method = Method::grid3d;
  c.reg = Regularizer::tv2;
  c.lambda = 3e7;
  c.candidates = CandidateDepths::uniform(0.9, 0.99, 4);
  const ReconConfig back = ReconConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(back.method == Method::grid3d);
  CHECK(back.lambda == 3e7);
  CHECK(back.candidates.size() == 4);
  CHECK_THROWS_AS(ReconConfig::from_json({{"lamda", 1.0}}), ConfigError);
  CHECK_THROWS(ReconConfig::from_json({{"method", "magic"}}));
  ReconConfig bad;
  bad.method = Method::grid3d;
  bad.reg = Regularizer::tv1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = ReconConfig{};
  bad.alpha_min = 0.99;
  bad.alpha_max = 0.98;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  for (Method m : {Method::sweep_only, Method::greedy_only, Method::continuous, Method::grid3d})
    CHECK(parse_method(to_string(m)) == m);
  for (Regularizer r : {Regularizer::none, Regularizer::tv2, Regularizer::wtv2, Regularizer::tv1})
    CHECK(parse_regularizer(to_string(r)) == r);
}

TEST_CASE("sweep picks the generating plane") {
  std::mt19937_64 rng(1);
  const int n = 8;
  const ForwardModel model(oracle::small_mask(), oracle::small_geometry(32, n));
  const Scene truth = plane_scene(n, kPlanes.alphas[2], rng);
  const Eigen::MatrixXd y = model.forward(truth);
  CglsOptions opts;
  opts.max_iter = 500;
  opts.rel_tol = 1e-14;
  const SweepResult r = sweep_init(model, y, kPlanes, opts);
  CHECK(r.best_index == 2);
  CHECK(r.alpha == kPlanes.alphas[2]);
  REQUIRE(r.losses.size() == 5);
  CHECK(r.losses[2] <= 1e-18 * y.squaredNorm());
  CHECK((r.intensity - truth.intensity).cwiseAbs().maxCoeff() < 1e-6);

  const CandidateDepths single = CandidateDepths::parse("0.96:0.96:1");
  const SweepResult one = sweep_init(model, y, single, opts);
  CHECK(one.best_index == 0);
  CHECK(one.alpha == 0.96);
}

TEST_CASE("greedy recovers a two-plane scene") {
  // Desk scale: 200 um pixels, default mask, 16 x 16 scene on a 64 x 64 sensor.
  CameraGeometry g = oracle::small_geometry(64, 16);
  g.pixel_pitch_m = 200e-6;
  const ForwardModel model(build_mask_profile(default_pattern()), g);
  const CandidateDepths planes = CandidateDepths::parse("0.990:0.998:5");
  for (auto [near, far] : {std::pair{0, 4}, std::pair{1, 2}, std::pair{2, 3}, std::pair{3, 1}}) {
    CAPTURE(near);
    CAPTURE(far);
    std::mt19937_64 rng(2 + near);
    Scene truth = oracle::random_scene(16, rng);
    truth.intensity(3, 3) = 0.05;
    truth.inv_depth.leftCols(8).setConstant(planes.alphas[near]);
    truth.inv_depth.rightCols(8).setConstant(planes.alphas[far]);
    const Eigen::MatrixXd y = model.forward(truth);
    GreedyOptions opts;
    opts.cgls.max_iter = 300;
    opts.cgls.rel_tol = 1e-12;
    nlohmann::json stage;
    const Scene est = greedy_init(model, y, planes, opts, &stage);
    for (Eigen::Index k = 0; k < 256; ++k)
      if (truth.intensity(k) > 0.1) CHECK(est.inv_depth(k) == truth.inv_depth(k));
    const std::vector<double> res = stage.at("residual_norms");
    CHECK(non_increasing(res, 0.0));
    CHECK(res.back() < 1e-6 * res.front());
  }
}

TEST_CASE("greedy with one candidate is the sweep") {
  std::mt19937_64 rng(3);
  const int n = 8;
  const ForwardModel model(oracle::small_mask(), oracle::small_geometry(32, n));
  const Eigen::MatrixXd y = model.forward(oracle::random_scene(n, rng));
  const CandidateDepths one = CandidateDepths::parse("0.97:0.97:1");
  const SweepResult sw = sweep_init(model, y, one);
  const Scene g = greedy_init(model, y, one);
  CHECK((g.inv_depth.array() == 0.97).all());
  CHECK((g.intensity.array() == sw.intensity.array()).all());
}

TEST_CASE("grid3d recovers a single voxel") {
  const int n = 8;
  const ForwardModel model(oracle::small_mask(), oracle::small_geometry(32, n));
  Scene truth;
  truth.intensity = Eigen::MatrixXd::Zero(n, n);
  truth.inv_depth = Eigen::MatrixXd::Constant(n, n, kPlanes.alphas[1]);
  truth.inv_depth(5, 2) = kPlanes.alphas[3];
  truth.intensity(5, 2) = 1.0;
  const Eigen::MatrixXd y = model.forward(truth);
  FistaOptions opts;
  opts.lambda1 = 1e-4;
  opts.max_iter = 2000;
  const Grid3dResult r = grid3d_baseline(model, y, kPlanes, opts);
  REQUIRE(r.volume.rows() == 5);
  REQUIRE(r.volume.cols() == n * n);
  Eigen::Index plane = 0, voxel = 0;
  r.volume.maxCoeff(&plane, &voxel);
  CHECK(plane == 3);
  CHECK(voxel == 2 * n + 5);
  CHECK(r.scene.inv_depth(5, 2) == kPlanes.alphas[3]);
  CHECK(r.scene.intensity(5, 2) == doctest::Approx(1.0).epsilon(0.05));
  CHECK(r.volume.minCoeff() >= 0.0);
  CHECK(non_increasing(r.objective_history, 1e-9));
}

TEST_CASE("grid3d with a huge penalty returns nothing") {
  std::mt19937_64 rng(4);
  const int n = 8;
  const ForwardModel model(oracle::small_mask(), oracle::small_geometry(32, n));
  const Eigen::MatrixXd y = model.forward(oracle::random_scene(n, rng));
  FistaOptions opts;
  opts.lambda1 = 1e12;
  const Grid3dResult r = grid3d_baseline(model, y, kPlanes, opts);
  CHECK(r.volume.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("grid3d with one plane and no penalty is least squares") {
  std::mt19937_64 rng(5);
  const int n = 8;
  const ForwardModel model(oracle::small_mask(), oracle::small_geometry(32, n));
  const Scene truth = plane_scene(n, 0.97, rng);
  const Eigen::MatrixXd y = model.forward(truth);
  const CandidateDepths one = CandidateDepths::parse("0.97:0.97:1");
  FistaOptions opts;
  opts.max_iter = 5000;
  opts.rel_tol = 0.0;
  const Grid3dResult r = grid3d_baseline(model, y, one, opts);
  CglsOptions cg;
  cg.max_iter = 500;
  cg.rel_tol = 1e-14;
  const SweepResult sw = sweep_init(model, y, one, cg);
  CHECK((r.scene.intensity - sw.intensity).cwiseAbs().maxCoeff() < 1e-4);
}

TEST_CASE("refinement from the truth stays put") {
  std::mt19937_64 rng(6);
  const int n = 8;
  const ForwardModel model(oracle::small_mask(), oracle::small_geometry(32, n));
  const Scene truth = oracle::random_scene(n, rng, 0.96, 0.98);
  const Eigen::MatrixXd y = model.forward(truth);
  ReconConfig cfg;
  cfg.reg = Regularizer::none;
  cfg.outer_iters = 3;
  const ReconResult r = refine(model, y, truth, cfg);
  CHECK(r.objective_history.back() <= 1e-20 * y.squaredNorm());
  CHECK((r.scene.inv_depth - truth.inv_depth).cwiseAbs().maxCoeff() < 1e-6);
  CHECK(non_increasing(r.objective_history));
}

TEST_CASE("refinement objective never increases") {
  std::mt19937_64 rng(7);
  const int n = 8;
  const ForwardModel model(oracle::small_mask(), oracle::small_geometry(32, n));
  Scene truth = oracle::random_scene(n, rng);
  for (int j = 0; j < n; ++j) truth.inv_depth.col(j).setConstant(j < n / 2 ? 0.962 : 0.981);
  const Measurement m = model.simulate(truth, 40.0, 3);
  for (Regularizer reg : {Regularizer::none, Regularizer::tv2, Regularizer::wtv2, Regularizer::tv1}) {
    CAPTURE(to_string(reg));
    ReconConfig cfg;
    cfg.reg = reg;
    cfg.lambda = reg == Regularizer::tv1 ? 1e2 : 1e4;
    cfg.sigma = 1e-5;
    cfg.outer_iters = 4;
    cfg.candidates = kPlanes;
    const Scene init = greedy_init(model, m.y, kPlanes);
    const ReconResult r = refine(model, m.y, init, cfg);
    CHECK(r.objective_history.size() >= 2);
    CHECK(non_increasing(r.objective_history));
    CHECK(r.objective_history.back() < r.objective_history.front());
    CHECK(r.objective_history.front() == doctest::Approx(refine_objective(model, m.y, init, cfg)));
  }
}

TEST_CASE("single-plane refinement moves one shared depth") {
  std::mt19937_64 rng(8);
  const int n = 8;
  const ForwardModel model(oracle::small_mask(), oracle::small_geometry(32, n));
  const Scene truth = plane_scene(n, 0.9655, rng);
  const Eigen::MatrixXd y = model.forward(truth);
  Scene init = truth;
  init.inv_depth.setConstant(0.96);
  ReconConfig cfg;
  cfg.reg = Regularizer::none;
  cfg.single_plane_depth = true;
  cfg.freeze_intensity = true;
  cfg.outer_iters = 5;
  const ReconResult r = refine(model, y, init, cfg);
  const double a = r.scene.inv_depth(0, 0);
  CHECK((r.scene.inv_depth.array() == a).all());
  CHECK(std::abs(a - 0.9655) < 1e-8);
  CHECK((r.scene.intensity.array() == truth.intensity.array()).all());
}

TEST_CASE("split Bregman reaches the constraint") {
  std::mt19937_64 rng(9);
  const int n = 12;
  Eigen::MatrixXd f = Eigen::MatrixXd::Zero(n, n);
  f.rightCols(n / 2).setConstant(1.0);
  f += 0.1 * oracle::random_matrix(n, n, rng);
  const MapOracle data = [&](const Eigen::MatrixXd& a, Eigen::MatrixXd& g) {
    g = a - f;
    return 0.5 * g.squaredNorm();
  };
  SplitBregmanOptions opts;
  opts.lambda = 0.05;
  opts.mu = 0.5;
  opts.max_iters = 500;
  opts.tol = 1e-6;
  opts.inner.grad_tol = 1e-12;
  opts.inner.max_iter = 200;
  const SplitBregmanResult r = split_bregman_tv1(data, f, opts);
  CHECK(r.relative_residual < 1e-5);
  auto objective = [&](const Eigen::MatrixXd& a) {
    return 0.5 * (a - f).squaredNorm() + opts.lambda * tv1_value(a);
  };
  const double fr = objective(r.alpha);
  CHECK(fr < objective(f));
  // Convexity: no random nearby point is noticeably better.
  for (int t = 0; t < 50; ++t) {
    const Eigen::MatrixXd p = r.alpha + 1e-3 * oracle::random_matrix(n, n, rng);
    CHECK(objective(p) >= fr - 1e-5);
  }
}

TEST_CASE("evaluate") {
  const CameraGeometry g = oracle::small_geometry(32, 4);
  Scene gt;
  gt.intensity = Eigen::MatrixXd::Constant(4, 4, 0.5);
  gt.inv_depth = Eigen::MatrixXd::Constant(4, 4, alpha_from_depth(1.2, g.mask_sensor_distance_m));
  Metrics m = evaluate(gt, gt, g);
  CHECK(m.psnr_db == kPsnrCap);
  CHECK(m.depth_rmse_m == 0.0);

  Scene est = gt;
  est.intensity.array() += 0.1;
  est.inv_depth.setConstant(alpha_from_depth(1.21, g.mask_sensor_distance_m));
  m = evaluate(est, gt, g);
  CHECK(m.psnr_db == doctest::Approx(20.0).epsilon(1e-9));
  CHECK(m.depth_rmse_m == doctest::Approx(0.010).epsilon(1e-9));

  gt.intensity(0, 0) = 0.0;
  est.inv_depth(0, 0) = 0.5;
  m = evaluate(est, gt, g, 0.25);
  CHECK(m.depth_rmse_m == doctest::Approx(0.010).epsilon(1e-9));
  CHECK_THROWS(evaluate(est, gt, g, 2.0));
}

TEST_CASE("synthetic scenes") {
  for (const char* kind : {"ramp_step", "plane", "two_plane"}) {
    CAPTURE(kind);
    SyntheticSpec spec;
    spec.kind = kind;
    const SyntheticScene s = make_synthetic_scene(spec);
    CHECK(s.intensity.rows() == 32);
    CHECK(s.intensity.minCoeff() >= 0.2);
    CHECK(s.intensity.maxCoeff() <= 1.0);
    CHECK(s.depth_m.minCoeff() >= 1.0);
    CHECK(s.depth_m.maxCoeff() <= 1.65);
  }
  const SyntheticScene r = make_synthetic_scene(SyntheticSpec{});
  // The step between columns n/2 - 1 and n/2 is the largest depth change.
  const double step = std::abs(r.depth_m(0, 16) - r.depth_m(0, 15));
  CHECK(step > 0.2);
  SyntheticSpec bad;
  bad.kind = "spiral";
  CHECK_THROWS(make_synthetic_scene(bad));
}

TEST_CASE("smoothness prior removes spurious minima along a line scan") {
  std::mt19937_64 rng(8);
  const int n = 8;
  const ForwardModel model(oracle::small_mask(), oracle::small_geometry(32, n));
  Scene truth = oracle::random_scene(n, rng);
  truth.inv_depth.setConstant(0.9);
  const Eigen::MatrixXd y = model.forward(truth);

  // One pixel swept far from the truth; the data term alone is multimodal there.
  auto count_minima = [&](const ReconConfig& cfg) {
    std::vector<double> f;
    for (int k = -800; k <= 180; ++k) {
      Scene s = truth;
      s.inv_depth(3, 3) += 5e-4 * k;
      f.push_back(refine_objective(model, y, s, cfg));
    }
    int minima = 0;
    for (std::size_t k = 1; k + 1 < f.size(); ++k)
      if (f[k] < f[k - 1] && f[k] < f[k + 1]) ++minima;
    return minima;
  };
  ReconConfig plain;
  plain.reg = Regularizer::none;
  ReconConfig smooth;
  smooth.reg = Regularizer::tv2;
  smooth.lambda = 1e3;
  const int without = count_minima(plain);
  const int with = count_minima(smooth);
  CAPTURE(without);
  CAPTURE(with);
  CHECK(without > 1);
  CHECK(with < without);
  CHECK(with == 1);
}
