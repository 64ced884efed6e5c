#include "l3d/geometry.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>

using namespace l3d;

TEST_CASE("alpha_from_depth") {
  CHECK(alpha_from_depth(0.42, 0.004) == doctest::Approx(0.99048).epsilon(1e-5));
  CHECK(std::abs(alpha_from_depth(0.42, 0.004) - 0.9905) < 5e-5);
  CHECK(alpha_from_depth(0.008, 0.004) == 0.5);
  CHECK(alpha_from_depth(1e12, 0.004) > 1.0 - 1e-11);
  CHECK(alpha_from_depth(1.2, 0.004) < alpha_from_depth(1.3, 0.004));
  CHECK_THROWS_AS(alpha_from_depth(0.004, 0.004), DomainError);
  CHECK_THROWS_AS(alpha_from_depth(0.001, 0.004), DomainError);
  CHECK_THROWS_AS(alpha_from_depth(std::nan(""), 0.004), DomainError);
  CHECK_THROWS_AS(alpha_from_depth(std::numeric_limits<double>::infinity(), 0.004), DomainError);
  CHECK_THROWS_AS(alpha_from_depth(1.0, 0.0), DomainError);
}

TEST_CASE("depth_from_alpha") {
  // 0.004 / 0.0095 = 0.421052...
  CHECK(depth_from_alpha(0.9905, 0.004) == doctest::Approx(0.42105).epsilon(1e-5));
  CHECK(depth_from_alpha(0.5, 0.004) == 0.008);
  const double a = alpha_from_depth(1.7, 0.004);
  CHECK(std::abs(depth_from_alpha(a, 0.004) - 1.7) / 1.7 < 1e-12);
  CHECK_THROWS_AS(depth_from_alpha(1.0, 0.004), DomainError);
  CHECK_THROWS_AS(depth_from_alpha(0.0, 0.004), DomainError);
  CHECK_THROWS_AS(depth_from_alpha(-0.2, 0.004), DomainError);
}

TEST_CASE("angle grid") {
  const AngleGrid g3 = make_angle_grid(3, 18.0);
  REQUIRE(g3.tan_theta.size() == 3);
  CHECK(g3.tan_theta[0] == doctest::Approx(-0.32492).epsilon(1e-5));
  CHECK(g3.tan_theta[1] == 0.0);
  CHECK(g3.tan_theta[2] == doctest::Approx(0.32492).epsilon(1e-5));

  const AngleGrid g2 = make_angle_grid(2, 18.0);
  REQUIRE(g2.tan_theta.size() == 2);
  CHECK(g2.tan_theta[0] == -g2.tan_theta[1]);
  CHECK(g2.tan_theta[1] == doctest::Approx(0.32492).epsilon(1e-5));

  const AngleGrid g32 = make_angle_grid(32, 18.0);
  for (int i = 0; i + 1 < 32; ++i) CHECK(g32.tan_theta[i] < g32.tan_theta[i + 1]);
  for (int i = 0; i < 32; ++i) CHECK(g32.tan_theta[i] == -g32.tan_theta[31 - i]);

  CHECK_THROWS_AS(make_angle_grid(1, 18.0), ConfigError);
}

TEST_CASE("sensor coordinates are centered") {
  CameraGeometry g;
  g.sensor_pixels = 4;
  g.pixel_pitch_m = 1e-4;
  CHECK(g.sensor_coord(0) == doctest::Approx(-1.5e-4));
  CHECK(g.sensor_coord(3) == doctest::Approx(1.5e-4));
  const Eigen::VectorXd s = g.sensor_coords();
  CHECK(s.sum() == doctest::Approx(0.0));
}

TEST_CASE("geometry validation") {
  CameraGeometry g;
  CHECK_NOTHROW(g.validate());
  CameraGeometry bad = g;
  bad.sensor_pixels = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = g;
  bad.pixel_pitch_m = -1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = g;
  bad.half_fov_deg = 90.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = g;
  bad.mask_sensor_distance_m = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("parse_length") {
  CHECK(parse_length("4mm") == doctest::Approx(0.004));
  CHECK(parse_length("0.4cm") == doctest::Approx(0.004));
  CHECK(parse_length("0.004m") == doctest::Approx(0.004));
  CHECK(parse_length("0.004") == doctest::Approx(0.004));
  CHECK_THROWS(parse_length("4 parsecs"));
  CHECK_THROWS(parse_length(""));
}
