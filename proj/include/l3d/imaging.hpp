#pragma once

#include "l3d/geometry.hpp"
#include "l3d/mask.hpp"
#include "l3d/parallel.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <cstdint>
#include <optional>
#include <span>
#include <string>

namespace l3d {

/// Intensity l and inverse depth alpha, both N x N. Entry (i, j) is the point
/// at angles (theta_i, theta_j); i pairs with sensor rows, j with columns.
struct Scene {
  Eigen::MatrixXd intensity;
  Eigen::MatrixXd inv_depth;

  int size() const { return static_cast<int>(intensity.rows()); }
  /// Throws ConfigError unless both maps are n x n and finite, with alpha in (0, 1).
  void validate(int n) const;
};

struct MeasurementMeta {
  CameraGeometry geometry;
  std::string mask_sha256;
  std::optional<double> snr_db;
  std::uint64_t seed = 0;
  /// Keys not listed above, kept so bundles round-trip.
  nlohmann::json extra = nlohmann::json::object();
};

struct Measurement {
  Eigen::MatrixXd y;
  MeasurementMeta meta;
};

/// y = Psi(alpha) l for a separable mask, plus its adjoint and the depth
/// gradient of the data term.
///
/// Every scene point contributes a rank-1 shadow psi_i psi_j^T, so the
/// kernels gather blocks of per-point vectors and apply them as matrix
/// products. Cost is O(M^2 N^2) per call.
class ForwardModel {
 public:
  ForwardModel(MaskProfile profile, CameraGeometry geom, ExecPolicy exec = {});

  const CameraGeometry& geometry() const { return geom_; }
  const MaskProfile& profile() const { return profile_; }
  const Eigen::VectorXd& sensor_coords() const { return coords_; }
  const AngleGrid& angles() const { return angles_; }
  const ExecPolicy& exec() const { return exec_; }
  void set_exec(ExecPolicy exec) { exec_ = exec; }
  int sensor_pixels() const { return geom_.sensor_pixels; }
  int scene_pixels() const { return geom_.scene_pixels; }

  /// mask(alpha s + d tan theta_i) over the sensor.
  Eigen::VectorXd psi(int angle_index, double alpha) const;
  /// Mask derivative at the same arguments.
  Eigen::VectorXd g(int angle_index, double alpha) const;

  /// psi_i psi_j^T.
  Eigen::MatrixXd basis_2d(int i, int j, double alpha) const;

  Eigen::MatrixXd forward(const Scene& scene) const;
  /// out(i, j) = psi_i^T r psi_j at alpha(i, j).
  Eigen::MatrixXd adjoint(const Eigen::MatrixXd& inv_depth, const Eigen::MatrixXd& r) const;

  Eigen::MatrixXd residual(const Eigen::MatrixXd& y, const Scene& scene) const;
  /// 0.5 * ||y - forward(scene)||_F^2
  double data_loss(const Eigen::MatrixXd& y, const Scene& scene) const;

  /// dL/dalpha(i, j) = -l(i, j) (gs_i^T R psi_j + psi_i^T R gs_j), gs = g * s.
  Eigen::MatrixXd depth_gradient(const Eigen::MatrixXd& y, const Scene& scene) const;
  /// Loss and depth gradient sharing one forward pass.
  double loss_and_depth_gradient(const Eigen::MatrixXd& y, const Scene& scene,
                                 Eigen::MatrixXd& grad) const;

  /// M x N matrix whose column i is psi_i at a constant alpha.
  Eigen::MatrixXd plane_basis(double alpha) const;

  /// forward(scene) plus i.i.d. Gaussian noise at the requested SNR relative
  /// to the rms of the clean measurement. Noiseless when snr_db is empty.
  Measurement simulate(const Scene& scene, std::optional<double> snr_db,
                       std::uint64_t seed) const;

 private:
  void sample_psi(double alpha, Eigen::Index angle, std::span<double> out) const;
  void sample_g(double alpha, Eigen::Index angle, std::span<double> out) const;
  void check_scene_dims(const Eigen::MatrixXd& m, const char* what) const;

  MaskProfile profile_;
  CameraGeometry geom_;
  ExecPolicy exec_;
  Eigen::VectorXd coords_;
  AngleGrid angles_;
  Eigen::VectorXd offsets_;  // d * tan(theta_i)
};

/// Separable single-plane operator: Y = B X B^T with B = plane_basis(alpha).
Eigen::MatrixXd plane_forward(const Eigen::MatrixXd& basis, const Eigen::MatrixXd& x);
/// X = B^T R B.
Eigen::MatrixXd plane_adjoint(const Eigen::MatrixXd& basis, const Eigen::MatrixXd& r);

}  // namespace l3d
