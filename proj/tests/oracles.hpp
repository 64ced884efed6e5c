#pragma once

// Independent reference implementations shared by the unit and acceptance tests.

#include "l3d/imaging.hpp"
#include "l3d/mask.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <random>

namespace oracle {

/// Small geometry used throughout: order-6 mask, 50 um pixels.
inline l3d::CameraGeometry small_geometry(int sensor_px, int scene_px) {
  l3d::CameraGeometry g;
  g.mask_sensor_distance_m = 4e-3;
  g.sensor_pixels = sensor_px;
  g.pixel_pitch_m = 50e-6;
  g.half_fov_deg = 18.0;
  g.scene_pixels = scene_px;
  return g;
}

inline l3d::MaskProfile small_mask(int order = 6) {
  return l3d::build_mask_profile(l3d::generate_mls(order, std::nullopt, 1u));
}

inline double tan_angle(int i, int n, double half_fov_deg) {
  const double h = half_fov_deg * std::numbers::pi / 180.0;
  return std::tan(-h + i * 2.0 * h / (n - 1));
}

/// y(u, v) = sum_ij l_ij m(a_ij s_u + d t_i) m(a_ij s_v + d t_j), one entry at a time.
inline Eigen::MatrixXd brute_forward(const l3d::MaskProfile& mask, const l3d::CameraGeometry& g,
                                     const l3d::Scene& scene) {
  const int m = g.sensor_pixels;
  const int n = g.scene_pixels;
  const double d = g.mask_sensor_distance_m;
  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(m, m);
  for (int u = 0; u < m; ++u) {
    const double su = (u - (m - 1) / 2.0) * g.pixel_pitch_m;
    for (int v = 0; v < m; ++v) {
      const double sv = (v - (m - 1) / 2.0) * g.pixel_pitch_m;
      double acc = 0.0;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          const double a = scene.inv_depth(i, j);
          acc += scene.intensity(i, j) * mask.value(a * su + d * tan_angle(i, n, g.half_fov_deg)) *
                 mask.value(a * sv + d * tan_angle(j, n, g.half_fov_deg));
        }
      y(u, v) = acc;
    }
  }
  return y;
}

/// True when some mask argument of pixel (i, j) crosses a fine-grid node as
/// alpha moves over [alpha - h, alpha + h]. The loss has a kink there, so a
/// central difference with step h is not a valid derivative estimate.
inline bool fd_stencil_crosses_node(const l3d::MaskProfile& mask, const l3d::CameraGeometry& g,
                                    const l3d::Scene& scene, double h) {
  const int m = g.sensor_pixels;
  const int n = g.scene_pixels;
  const double d = g.mask_sensor_distance_m;
  auto node = [&](double u) { return std::floor((u - mask.origin_m()) / mask.grid_step_m()); };
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double a = scene.inv_depth(i, j);
      for (int u = 0; u < m; ++u) {
        const double s = (u - (m - 1) / 2.0) * g.pixel_pitch_m;
        for (int t : {i, j}) {
          const double off = d * tan_angle(t, n, g.half_fov_deg);
          if (node((a - h) * s + off) != node((a + h) * s + off)) return true;
        }
      }
    }
  return false;
}

inline l3d::Scene random_scene(int n, std::mt19937_64& rng, double a_lo = 0.985,
                               double a_hi = 0.998) {
  std::uniform_real_distribution<double> li(0.2, 1.0), ai(a_lo, a_hi);
  l3d::Scene s;
  s.intensity.resize(n, n);
  s.inv_depth.resize(n, n);
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i) {
      s.intensity(i, j) = li(rng);
      s.inv_depth(i, j) = ai(rng);
    }
  return s;
}

inline Eigen::MatrixXd random_matrix(int r, int c, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  Eigen::MatrixXd m(r, c);
  for (int j = 0; j < c; ++j)
    for (int i = 0; i < r; ++i) m(i, j) = nd(rng);
  return m;
}

/// Central differences of the data loss with respect to every alpha entry.
inline Eigen::MatrixXd fd_depth_gradient(const l3d::ForwardModel& model, const Eigen::MatrixXd& y,
                                         const l3d::Scene& scene, double h) {
  const int n = scene.size();
  Eigen::MatrixXd g(n, n);
  l3d::Scene p = scene;
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i) {
      const double a = scene.inv_depth(i, j);
      p.inv_depth(i, j) = a + h;
      const double fp = model.data_loss(y, p);
      p.inv_depth(i, j) = a - h;
      const double fm = model.data_loss(y, p);
      p.inv_depth(i, j) = a;
      g(i, j) = (fp - fm) / (2.0 * h);
    }
  return g;
}

}  // namespace oracle
