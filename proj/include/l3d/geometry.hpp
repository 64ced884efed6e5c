#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace l3d {

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Mask/sensor/scene layout. All lengths in meters.
struct CameraGeometry {
  double mask_sensor_distance_m = 4e-3;
  int sensor_pixels = 512;
  double pixel_pitch_m = 50e-6;
  double half_fov_deg = 18.0;
  int scene_pixels = 128;

  /// Throws ConfigError if any invariant is violated.
  void validate() const;

  /// Centered coordinate of sensor pixel k: (k - (M-1)/2) * pitch.
  double sensor_coord(int k) const;
  Eigen::VectorXd sensor_coords() const;
};

struct AngleGrid {
  Eigen::VectorXd tan_theta;
};

/// alpha = 1 - d/z. Requires z > d > 0.
double alpha_from_depth(double z_m, double d_m);
/// z = d / (1 - alpha). Requires 0 < alpha < 1.
double depth_from_alpha(double alpha, double d_m);

/// N endpoint-inclusive uniformly spaced angles over [-half_fov, +half_fov].
AngleGrid make_angle_grid(int n, double half_fov_deg);

/// Entrywise alpha_from_depth over a depth map.
Eigen::MatrixXd alpha_map_from_depth(const Eigen::MatrixXd& z_m, double d_m);
Eigen::MatrixXd depth_map_from_alpha(const Eigen::MatrixXd& alpha, double d_m);

/// Parses "4mm", "0.4cm", "0.004m" or a bare number (meters).
double parse_length(const std::string& text);

}  // namespace l3d
