#pragma once

#include "l3d/imaging.hpp"
#include "l3d/regularizers.hpp"
#include "l3d/solvers.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <string>
#include <vector>

namespace l3d {

/// Strictly increasing inverse-depth samples in (0, 1).
struct CandidateDepths {
  std::vector<double> alphas;

  /// D samples from a0 to a1 inclusive, uniform in alpha.
  static CandidateDepths uniform(double a0, double a1, int count);
  /// "a0:a1:D"; "a:a:1" gives a single plane.
  static CandidateDepths parse(const std::string& text);
  void validate() const;
  int size() const { return static_cast<int>(alphas.size()); }
};

enum class Method { sweep_only, greedy_only, continuous, grid3d };
enum class InitKind { single_plane, greedy };
enum class Regularizer { none, tv2, wtv2, tv1 };

std::string to_string(Method m);
std::string to_string(InitKind k);
std::string to_string(Regularizer r);
Method parse_method(const std::string& s);
InitKind parse_init(const std::string& s);
Regularizer parse_regularizer(const std::string& s);

struct ReconConfig {
  Method method = Method::continuous;
  InitKind init = InitKind::greedy;
  Regularizer reg = Regularizer::wtv2;
  /// Tuned for the desk setup; see configs/.
  double lambda = 1e6;
  /// Scale of the weighted-TV falloff exp(-diff^2 / sigma).
  double sigma = 1e-8;
  /// Split-Bregman coupling weight (tv1).
  double mu = 1.0;
  int outer_iters = 10;
  /// Stop the outer loop once an iteration lowers the objective by less than this fraction.
  double outer_rel_tol = 1e-9;
  LbfgsOptions depth_opts = default_depth_opts();
  CglsOptions intensity_opts = default_intensity_opts();
  CandidateDepths candidates = CandidateDepths::uniform(0.996, 0.9976, 15);
  double alpha_min = 0.9;
  double alpha_max = 0.9999;

  int greedy_iters = 10;
  int atoms_per_pixel = 3;
  /// Minimum fractional residual decrease for another greedy iteration.
  double greedy_min_decrease = 1e-3;

  int bregman_iters = 60;
  double bregman_tol = 1e-5;

  double fista_lambda = 0.0;
  int fista_iters = 300;

  /// Refine one shared alpha instead of a per-pixel map.
  bool single_plane_depth = false;
  /// Keep the initial intensity fixed during refinement.
  bool freeze_intensity = false;
  /// Clamp intensity to >= 0 after every intensity step.
  bool nonneg_intensity = false;

  static LbfgsOptions default_depth_opts();
  static CglsOptions default_intensity_opts();

  /// Throws ConfigError on non-positive parameters or an empty box.
  void validate() const;
  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys are rejected.
  static ReconConfig from_json(const nlohmann::json& j);
};

struct ReconResult {
  Scene scene;
  /// Objective at the initialization, then after every half-step.
  std::vector<double> objective_history;
  /// Per-stage diagnostics (solver terminations, iteration counts, losses).
  nlohmann::json stages = nlohmann::json::array();
  double wall_time_s = 0.0;
};

struct SweepResult {
  double alpha = 0.0;
  Eigen::MatrixXd intensity;
  /// Data loss of the least-squares fit at every candidate.
  std::vector<double> losses;
  int best_index = 0;
};

/// Least-squares intensity at a constant alpha.
Eigen::MatrixXd solve_plane_intensity(const ForwardModel& model, const Eigen::MatrixXd& y,
                                      double alpha, const CglsOptions& opts, double* loss = nullptr);

/// Fits every candidate plane and keeps the one with the smallest loss.
SweepResult sweep_init(const ForwardModel& model, const Eigen::MatrixXd& y,
                       const CandidateDepths& candidates, const CglsOptions& opts = {});

struct GreedyOptions {
  int iters = 10;
  int atoms_per_pixel = 3;
  double min_decrease = 1e-3;
  CglsOptions cgls = {};
};

/// Starts from the best single plane, then repeatedly appends the
/// best-correlated candidate per pixel, solves jointly and prunes to the
/// strongest atom. Residual norms are recorded in `stage` when given.
Scene greedy_init(const ForwardModel& model, const Eigen::MatrixXd& y,
                  const CandidateDepths& candidates, const GreedyOptions& opts = {},
                  nlohmann::json* stage = nullptr);

/// Regularized objective tracked across refinement. For wtv2 this is the
/// smooth potential whose majorizers the reweighted steps descend.
double refine_objective(const ForwardModel& model, const Eigen::MatrixXd& y, const Scene& scene,
                        const ReconConfig& cfg);

/// Alternating depth (L-BFGS) and intensity (CGLS) updates from `init`.
/// Throws DomainError if the objective becomes non-finite.
ReconResult refine(const ForwardModel& model, const Eigen::MatrixXd& y, const Scene& init,
                   const ReconConfig& cfg);

struct SplitBregmanOptions {
  double lambda = 0.0;
  double mu = 1.0;
  int max_iters = 60;
  /// Stop once ||grad a - d|| <= tol * ||grad a||.
  double tol = 1e-5;
  LbfgsOptions inner = {};
};

struct SplitBregmanResult {
  Eigen::MatrixXd alpha;
  int iterations = 0;
  double constraint_residual = 0.0;
  double relative_residual = 0.0;
  std::vector<double> objective_history;
};

/// Data(a) + lambda ||grad a||_1 by split Bregman, for any smooth data term
/// given as value/gradient over the n x n map.
using MapOracle = std::function<double(const Eigen::MatrixXd& a, Eigen::MatrixXd& grad)>;
SplitBregmanResult split_bregman_tv1(const MapOracle& data, const Eigen::MatrixXd& alpha0,
                                     const SplitBregmanOptions& opts);

struct FistaOptions {
  double lambda1 = 0.0;
  int max_iter = 300;
  /// Stop when the relative objective change falls below this.
  double rel_tol = 1e-10;
  int power_iters = 50;
};

struct Grid3dResult {
  Scene scene;
  /// D x (N*N) voxel intensities, column k = pixel k in column-major order.
  Eigen::MatrixXd volume;
  std::vector<double> objective_history;
};

/// Non-negative l1 recovery over all candidate planes, then per-angle argmax.
Grid3dResult grid3d_baseline(const ForwardModel& model, const Eigen::MatrixXd& y,
                             const CandidateDepths& candidates, const FistaOptions& opts = {});

struct Metrics {
  double psnr_db = 0.0;
  double depth_rmse_m = 0.0;
};

inline constexpr double kPsnrCap = 99.0;

/// PSNR against peak 1 (capped at kPsnrCap) and depth RMSE in meters over
/// pixels whose ground-truth intensity exceeds `threshold`.
Metrics evaluate(const Scene& est, const Scene& gt, const CameraGeometry& geom,
                 double threshold = 0.0);

/// Runs the pipeline selected by cfg.method.
ReconResult reconstruct(const ForwardModel& model, const Eigen::MatrixXd& y,
                        const ReconConfig& cfg);

/// Synthetic test scenes: "ramp_step", "plane", "two_plane".
/// Depths are in meters; intensity is a smooth texture in [0.2, 1].
struct SyntheticSpec {
  std::string kind = "ramp_step";
  int n = 32;
  double z_near_m = 1.0;
  double z_far_m = 1.65;
  std::uint64_t seed = 1;
};
struct SyntheticScene {
  Eigen::MatrixXd intensity;
  Eigen::MatrixXd depth_m;
};
SyntheticScene make_synthetic_scene(const SyntheticSpec& spec);

}  // namespace l3d
