#include "l3d/geometry.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace l3d {

void CameraGeometry::validate() const {
  if (!(mask_sensor_distance_m > 0.0) || !std::isfinite(mask_sensor_distance_m))
    throw ConfigError("mask_sensor_distance_m must be positive");
  if (!(pixel_pitch_m > 0.0) || !std::isfinite(pixel_pitch_m))
    throw ConfigError("pixel_pitch_m must be positive");
  if (sensor_pixels < 2) throw ConfigError("sensor_pixels must be >= 2");
  if (scene_pixels < 2) throw ConfigError("scene_pixels must be >= 2");
  if (!(half_fov_deg > 0.0 && half_fov_deg < 90.0))
    throw ConfigError("half_fov_deg must lie in (0, 90)");
}

double CameraGeometry::sensor_coord(int k) const {
  return (k - 0.5 * (sensor_pixels - 1)) * pixel_pitch_m;
}

Eigen::VectorXd CameraGeometry::sensor_coords() const {
  Eigen::VectorXd s(sensor_pixels);
  for (int k = 0; k < sensor_pixels; ++k) s[k] = sensor_coord(k);
  return s;
}

double alpha_from_depth(double z_m, double d_m) {
  if (!std::isfinite(z_m) || !std::isfinite(d_m) || !(d_m > 0.0) || !(z_m > d_m)) {
    std::ostringstream msg;
    msg << "alpha_from_depth: need z > d > 0 (z=" << z_m << ", d=" << d_m << ")";
    throw DomainError(msg.str());
  }
  return 1.0 - d_m / z_m;
}

double depth_from_alpha(double alpha, double d_m) {
  if (!std::isfinite(alpha) || !(alpha > 0.0 && alpha < 1.0) || !(d_m > 0.0)) {
    std::ostringstream msg;
    msg << "depth_from_alpha: need 0 < alpha < 1 (alpha=" << alpha << ")";
    throw DomainError(msg.str());
  }
  return d_m / (1.0 - alpha);
}

AngleGrid make_angle_grid(int n, double half_fov_deg) {
  if (n < 2) throw ConfigError("angle grid needs at least 2 samples");
  const double half = half_fov_deg * std::numbers::pi / 180.0;
  AngleGrid grid;
  grid.tan_theta.resize(n);
  for (int i = 0; i < n; ++i) {
    // Mirror the upper half so the grid is exactly antisymmetric.
    const int mirror = n - 1 - i;
    if (mirror < i) {
      grid.tan_theta[i] = -grid.tan_theta[mirror];
    } else if (mirror == i) {
      grid.tan_theta[i] = 0.0;
    } else {
      const double theta = -half + i * (2.0 * half) / (n - 1);
      grid.tan_theta[i] = std::tan(theta);
    }
  }
  return grid;
}

Eigen::MatrixXd alpha_map_from_depth(const Eigen::MatrixXd& z_m, double d_m) {
  return z_m.unaryExpr([d_m](double z) { return alpha_from_depth(z, d_m); });
}

Eigen::MatrixXd depth_map_from_alpha(const Eigen::MatrixXd& alpha, double d_m) {
  return alpha.unaryExpr([d_m](double a) { return depth_from_alpha(a, d_m); });
}

double parse_length(const std::string& text) {
  std::size_t used = 0;
  double value = 0.0;
  try {
    value = std::stod(text, &used);
  } catch (const std::exception&) {
    throw ConfigError("not a length: '" + text + "'");
  }
  const std::string unit = text.substr(used);
  double scale = 1.0;
  if (unit.empty() || unit == "m") {
    scale = 1.0;
  } else if (unit == "cm") {
    scale = 1e-2;
  } else if (unit == "mm") {
    scale = 1e-3;
  } else if (unit == "um") {
    scale = 1e-6;
  } else {
    throw ConfigError("unknown length unit in '" + text + "'");
  }
  return value * scale;
}

}  // namespace l3d
