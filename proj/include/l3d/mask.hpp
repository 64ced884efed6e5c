#pragma once

#include "l3d/geometry.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace l3d {

/// 0/1 mask code: MLS with -1 mapped to 0.
struct BinaryPattern {
  std::vector<std::uint8_t> bits;
  double feature_width_m = 30e-6;

  std::size_t ones() const;
  double width_m() const { return bits.size() * feature_width_m; }
};

/// Primitive polynomial for LFSR orders 3..12, as a bitmask including the
/// x^order and constant terms (x^3 + x + 1 -> 0b1011). nullopt otherwise.
std::optional<std::uint32_t> primitive_polynomial(int order);

/// Maximal-length sequence of 2^order - 1 bits from the recurrence
/// a[n+order] = sum_i c_i a[n+i] (mod 2), c_i = bit i of `taps`.
/// Bit i of `seed_state` gives a[i]. Throws ConfigError on zero seed, on an
/// order without a built-in polynomial when `taps` is empty, or when the
/// taps do not produce a maximal period.
BinaryPattern generate_mls(int order, std::optional<std::uint32_t> taps, std::uint32_t seed_state,
                           double feature_width_m = 30e-6);

/// Appends `count` zero features.
BinaryPattern pad_pattern(BinaryPattern pattern, std::size_t count);

/// Order-10 MLS plus one zero feature: the 1024-feature simulation mask.
BinaryPattern default_pattern(double feature_width_m = 30e-6);

/// Smoothed 1-D transmittance on a fine grid centered on the mask.
///
/// Values are linearly interpolated between nodes. The derivative returned by
/// derivative() is the slope of the interpolant on the segment containing u,
/// and at a node it is the symmetric difference stored in deriv_samples.
class MaskProfile {
 public:
  MaskProfile() = default;
  /// Takes fine-grid samples; derivative samples are recomputed.
  MaskProfile(Eigen::VectorXd samples, double grid_step_m, double origin_m);

  double value(double u) const;
  double derivative(double u) const;

  const Eigen::VectorXd& samples() const { return samples_; }
  const Eigen::VectorXd& deriv_samples() const { return deriv_samples_; }
  double grid_step_m() const { return step_; }
  double origin_m() const { return origin_; }
  double support_lo_m() const { return origin_; }
  double support_hi_m() const { return origin_ + (samples_.size() - 1) * step_; }
  double support_halfwidth_m() const;

  /// out[k] = value(scale * coords[k] + offset).
  void sample(std::span<const double> coords, double scale, double offset,
              std::span<double> out) const;
  /// out[k] = derivative(scale * coords[k] + offset).
  void sample_derivative(std::span<const double> coords, double scale, double offset,
                         std::span<double> out) const;

  /// out[k] = value(u0 + k * du); branch-free for evenly spaced arguments.
  void sample_uniform(double u0, double du, std::span<double> out) const;
  void sample_derivative_uniform(double u0, double du, std::span<double> out) const;

 private:
  // t is the fractional node index, already inside [0, size - 1].
  double derivative_at(double t) const;
  void sample_inside(double t0, double dt, std::span<double> out) const;

  Eigen::VectorXd samples_;
  Eigen::VectorXd deriv_samples_;
  // samples_[i] at 2i and samples_[i + 1] - samples_[i] at 2i + 1.
  Eigen::VectorXd pairs_;
  double step_ = 0.0;
  double origin_ = 0.0;
  double inv_step_ = 0.0;
};

struct MaskBuildOptions {
  double blur_len_m = 15e-6;
  double blur_sigma_samples = 5.0;
  /// Defaults to feature_width / 20 when unset.
  std::optional<double> grid_step_m;
};

/// Nearest-neighbor upsampling of the pattern onto the fine grid, followed by
/// a unit-sum Gaussian kernel truncated to blur_len_m.
MaskProfile build_mask_profile(const BinaryPattern& pattern, const MaskBuildOptions& opts = {});

/// mask(alpha * s_k + d * tan_theta) for every sensor pixel k.
Eigen::VectorXd psi_1d(const MaskProfile& profile, const CameraGeometry& geom, double tan_theta,
                       double alpha);
/// Mask derivative at the same arguments as psi_1d.
Eigen::VectorXd g_1d(const MaskProfile& profile, const CameraGeometry& geom, double tan_theta,
                     double alpha);

}  // namespace l3d
