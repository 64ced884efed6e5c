#include "l3d/imaging.hpp"

#include <cmath>
#include <random>
#include <sstream>
#include <vector>

namespace l3d {

namespace {

constexpr Eigen::Index kBlock = 128;

std::span<double> col_span(Eigen::MatrixXd& m, Eigen::Index c) {
  return {m.col(c).data(), static_cast<std::size_t>(m.rows())};
}

}  // namespace

void Scene::validate(int n) const {
  if (intensity.rows() != n || intensity.cols() != n || inv_depth.rows() != n ||
      inv_depth.cols() != n) {
    std::ostringstream msg;
    msg << "scene must be " << n << "x" << n << " (intensity " << intensity.rows() << "x"
        << intensity.cols() << ", alpha " << inv_depth.rows() << "x" << inv_depth.cols() << ")";
    throw ConfigError(msg.str());
  }
  if (!intensity.allFinite()) throw ConfigError("scene intensity has non-finite entries");
  if (!inv_depth.allFinite() || (inv_depth.array() <= 0.0).any() ||
      (inv_depth.array() >= 1.0).any())
    throw ConfigError("scene inverse depth must lie in (0, 1)");
}

ForwardModel::ForwardModel(MaskProfile profile, CameraGeometry geom, ExecPolicy exec)
    : profile_(std::move(profile)), geom_(geom), exec_(exec) {
  geom_.validate();
  coords_ = geom_.sensor_coords();
  angles_ = make_angle_grid(geom_.scene_pixels, geom_.half_fov_deg);
  offsets_ = geom_.mask_sensor_distance_m * angles_.tan_theta;
}

void ForwardModel::check_scene_dims(const Eigen::MatrixXd& m, const char* what) const {
  const int n = geom_.scene_pixels;
  if (m.rows() != n || m.cols() != n) {
    std::ostringstream msg;
    msg << what << " must be " << n << "x" << n << ", got " << m.rows() << "x" << m.cols();
    throw ConfigError(msg.str());
  }
}

void ForwardModel::sample_psi(double alpha, Eigen::Index angle, std::span<double> out) const {
  profile_.sample_uniform(alpha * coords_[0] + offsets_[angle], alpha * geom_.pixel_pitch_m, out);
}

void ForwardModel::sample_g(double alpha, Eigen::Index angle, std::span<double> out) const {
  profile_.sample_derivative_uniform(alpha * coords_[0] + offsets_[angle],
                                     alpha * geom_.pixel_pitch_m, out);
}

Eigen::VectorXd ForwardModel::psi(int angle_index, double alpha) const {
  Eigen::VectorXd out(coords_.size());
  sample_psi(alpha, angle_index, {out.data(), static_cast<std::size_t>(out.size())});
  return out;
}

Eigen::VectorXd ForwardModel::g(int angle_index, double alpha) const {
  Eigen::VectorXd out(coords_.size());
  sample_g(alpha, angle_index, {out.data(), static_cast<std::size_t>(out.size())});
  return out;
}

Eigen::MatrixXd ForwardModel::basis_2d(int i, int j, double alpha) const {
  return psi(i, alpha) * psi(j, alpha).transpose();
}

Eigen::MatrixXd ForwardModel::forward(const Scene& scene) const {
  check_scene_dims(scene.intensity, "intensity");
  check_scene_dims(scene.inv_depth, "inverse depth");
  const Eigen::Index m = geom_.sensor_pixels;
  const Eigen::Index n = geom_.scene_pixels;

  std::vector<Eigen::Index> active;
  active.reserve(static_cast<std::size_t>(n * n));
  for (Eigen::Index p = 0; p < n * n; ++p)
    if (scene.intensity.data()[p] != 0.0) active.push_back(p);

  const int workers = exec_.resolved_threads();
  const std::size_t nblocks = (active.size() + kBlock - 1) / kBlock;
  std::vector<Eigen::MatrixXd> partial(
      static_cast<std::size_t>(std::max(1, std::min<int>(workers, static_cast<int>(nblocks)))));

  parallel_ranges(nblocks, static_cast<int>(partial.size()),
                  [&](int w, std::size_t b0, std::size_t b1) {
    Eigen::MatrixXd& acc = partial[static_cast<std::size_t>(w)];
    acc.setZero(m, m);
    Eigen::MatrixXd left(m, kBlock), right(m, kBlock);
    for (std::size_t b = b0; b < b1; ++b) {
      const std::size_t first = b * kBlock;
      const Eigen::Index count =
          static_cast<Eigen::Index>(std::min<std::size_t>(kBlock, active.size() - first));
      for (Eigen::Index c = 0; c < count; ++c) {
        const Eigen::Index p = active[first + static_cast<std::size_t>(c)];
        const Eigen::Index i = p % n, j = p / n;
        const double alpha = scene.inv_depth(i, j);
        sample_psi(alpha, i, col_span(left, c));
        sample_psi(alpha, j, col_span(right, c));
        left.col(c) *= scene.intensity(i, j);
      }
      acc.noalias() += left.leftCols(count) * right.leftCols(count).transpose();
    }
  });

  if (partial.empty() || nblocks == 0) return Eigen::MatrixXd::Zero(m, m);
  Eigen::MatrixXd y = std::move(partial.front());
  for (std::size_t w = 1; w < partial.size(); ++w) y += partial[w];
  return y;
}

Eigen::MatrixXd ForwardModel::adjoint(const Eigen::MatrixXd& inv_depth,
                                      const Eigen::MatrixXd& r) const {
  check_scene_dims(inv_depth, "inverse depth");
  const Eigen::Index m = geom_.sensor_pixels;
  const Eigen::Index n = geom_.scene_pixels;
  if (r.rows() != m || r.cols() != m) throw ConfigError("adjoint: residual must be M x M");

  Eigen::MatrixXd out(n, n);
  const std::size_t nblocks = static_cast<std::size_t>((n * n + kBlock - 1) / kBlock);
  parallel_ranges(nblocks, exec_.resolved_threads(), [&](int, std::size_t b0, std::size_t b1) {
    Eigen::MatrixXd left(m, kBlock), right(m, kBlock), rr(m, kBlock);
    for (std::size_t b = b0; b < b1; ++b) {
      const Eigen::Index first = static_cast<Eigen::Index>(b) * kBlock;
      const Eigen::Index count = std::min<Eigen::Index>(kBlock, n * n - first);
      for (Eigen::Index c = 0; c < count; ++c) {
        const Eigen::Index p = first + c;
        const Eigen::Index i = p % n, j = p / n;
        const double alpha = inv_depth(i, j);
        sample_psi(alpha, i, col_span(left, c));
        sample_psi(alpha, j, col_span(right, c));
      }
      rr.leftCols(count).noalias() = r * right.leftCols(count);
      for (Eigen::Index c = 0; c < count; ++c)
        out.data()[first + c] = left.col(c).dot(rr.col(c));
    }
  });
  return out;
}

Eigen::MatrixXd ForwardModel::residual(const Eigen::MatrixXd& y, const Scene& scene) const {
  const Eigen::Index m = geom_.sensor_pixels;
  if (y.rows() != m || y.cols() != m) throw ConfigError("measurement must be M x M");
  return y - forward(scene);
}

double ForwardModel::data_loss(const Eigen::MatrixXd& y, const Scene& scene) const {
  return 0.5 * residual(y, scene).squaredNorm();
}

Eigen::MatrixXd ForwardModel::depth_gradient(const Eigen::MatrixXd& y, const Scene& scene) const {
  Eigen::MatrixXd grad;
  loss_and_depth_gradient(y, scene, grad);
  return grad;
}

double ForwardModel::loss_and_depth_gradient(const Eigen::MatrixXd& y, const Scene& scene,
                                             Eigen::MatrixXd& grad) const {
  const Eigen::MatrixXd r = residual(y, scene);
  const Eigen::Index m = geom_.sensor_pixels;
  const Eigen::Index n = geom_.scene_pixels;

  std::vector<Eigen::Index> active;
  active.reserve(static_cast<std::size_t>(n * n));
  for (Eigen::Index p = 0; p < n * n; ++p)
    if (scene.intensity.data()[p] != 0.0) active.push_back(p);

  grad.setZero(n, n);
  const std::size_t nblocks = (active.size() + kBlock - 1) / kBlock;
  parallel_ranges(nblocks, exec_.resolved_threads(), [&](int, std::size_t b0, std::size_t b1) {
    // Columns [0, count) hold psi_j, [count, 2 count) hold g_j * s.
    Eigen::MatrixXd rows_psi(m, kBlock), rows_gs(m, kBlock), cols(m, 2 * kBlock),
        rc(m, 2 * kBlock);
    for (std::size_t b = b0; b < b1; ++b) {
      const std::size_t first = b * kBlock;
      const Eigen::Index count =
          static_cast<Eigen::Index>(std::min<std::size_t>(kBlock, active.size() - first));
      for (Eigen::Index c = 0; c < count; ++c) {
        const Eigen::Index p = active[first + static_cast<std::size_t>(c)];
        const Eigen::Index i = p % n, j = p / n;
        const double alpha = scene.inv_depth(i, j);
        sample_psi(alpha, i, col_span(rows_psi, c));
        sample_g(alpha, i, col_span(rows_gs, c));
        rows_gs.col(c).array() *= coords_.array();
        sample_psi(alpha, j, col_span(cols, c));
        sample_g(alpha, j, col_span(cols, count + c));
        cols.col(count + c).array() *= coords_.array();
      }
      rc.leftCols(2 * count).noalias() = r * cols.leftCols(2 * count);
      for (Eigen::Index c = 0; c < count; ++c) {
        const Eigen::Index p = active[first + static_cast<std::size_t>(c)];
        const double bilinear =
            rows_gs.col(c).dot(rc.col(c)) + rows_psi.col(c).dot(rc.col(count + c));
        grad.data()[p] = -scene.intensity.data()[p] * bilinear;
      }
    }
  });
  return 0.5 * r.squaredNorm();
}

Eigen::MatrixXd ForwardModel::plane_basis(double alpha) const {
  const Eigen::Index m = geom_.sensor_pixels;
  const Eigen::Index n = geom_.scene_pixels;
  Eigen::MatrixXd basis(m, n);
  for (Eigen::Index i = 0; i < n; ++i)
    sample_psi(alpha, i, col_span(basis, i));
  return basis;
}

Measurement ForwardModel::simulate(const Scene& scene, std::optional<double> snr_db,
                                   std::uint64_t seed) const {
  scene.validate(geom_.scene_pixels);
  Measurement out;
  out.y = forward(scene);
  out.meta.geometry = geom_;
  out.meta.snr_db = snr_db;
  out.meta.seed = seed;
  if (snr_db) {
    const double rms = std::sqrt(out.y.squaredNorm() / static_cast<double>(out.y.size()));
    const double sigma = rms / std::pow(10.0, *snr_db / 20.0);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, sigma);
    for (Eigen::Index k = 0; k < out.y.size(); ++k) out.y.data()[k] += noise(rng);
  }
  return out;
}

Eigen::MatrixXd plane_forward(const Eigen::MatrixXd& basis, const Eigen::MatrixXd& x) {
  return basis * (x * basis.transpose());
}

Eigen::MatrixXd plane_adjoint(const Eigen::MatrixXd& basis, const Eigen::MatrixXd& r) {
  return basis.transpose() * (r * basis);
}

}  // namespace l3d
