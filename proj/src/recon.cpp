#include "l3d/recon.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

namespace l3d {

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

VectorXd flat(const MatrixXd& m) { return Eigen::Map<const VectorXd>(m.data(), m.size()); }

MatrixXd unflat(const VectorXd& v, Eigen::Index rows, Eigen::Index cols) {
  return Eigen::Map<const MatrixXd>(v.data(), rows, cols);
}

std::vector<MatrixXd> plane_bases(const ForwardModel& model, const CandidateDepths& c) {
  std::vector<MatrixXd> out;
  out.reserve(c.alphas.size());
  for (double a : c.alphas) out.push_back(model.plane_basis(a));
  return out;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

nlohmann::json solve_report_json(const SolveReport& r) {
  return {{"iterations", r.iterations},
          {"evaluations", r.evaluations},
          {"final_value", r.final_value},
          {"grad_norm", r.grad_norm},
          {"termination", to_string(r.termination)},
          {"projected", r.projected}};
}

}  // namespace

CandidateDepths CandidateDepths::uniform(double a0, double a1, int count) {
  if (count < 1) throw ConfigError("candidate count must be >= 1");
  CandidateDepths c;
  if (count == 1) {
    if (a0 != a1) throw ConfigError("a single candidate needs a0 == a1");
    c.alphas = {a0};
  } else {
    c.alphas.resize(count);
    for (int k = 0; k < count; ++k) c.alphas[k] = a0 + (a1 - a0) * k / (count - 1);
    c.alphas.back() = a1;
  }
  c.validate();
  return c;
}

CandidateDepths CandidateDepths::parse(const std::string& text) {
  std::vector<std::string> parts;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ':');) parts.push_back(item);
  if (parts.size() != 3) throw ConfigError("candidates must look like a0:a1:D, got '" + text + "'");
  try {
    std::size_t used = 0;
    const double a0 = std::stod(parts[0], &used);
    if (used != parts[0].size()) throw std::invalid_argument(parts[0]);
    const double a1 = std::stod(parts[1], &used);
    if (used != parts[1].size()) throw std::invalid_argument(parts[1]);
    const int count = std::stoi(parts[2], &used);
    if (used != parts[2].size()) throw std::invalid_argument(parts[2]);
    return uniform(a0, a1, count);
  } catch (const std::logic_error& e) {
    if (dynamic_cast<const ConfigError*>(&e)) throw;
    throw ConfigError("candidates must look like a0:a1:D, got '" + text + "'");
  }
}

void CandidateDepths::validate() const {
  if (alphas.empty()) throw ConfigError("candidate set is empty");
  for (std::size_t k = 0; k < alphas.size(); ++k) {
    if (!(alphas[k] > 0.0 && alphas[k] < 1.0))
      throw ConfigError("candidate alphas must lie in (0, 1)");
    if (k > 0 && !(alphas[k] > alphas[k - 1]))
      throw ConfigError("candidate alphas must be strictly increasing");
  }
}

std::string to_string(Method m) {
  switch (m) {
    case Method::sweep_only: return "sweep";
    case Method::greedy_only: return "greedy";
    case Method::continuous: return "continuous";
    case Method::grid3d: return "grid3d";
  }
  return "unknown";
}

std::string to_string(InitKind k) { return k == InitKind::greedy ? "greedy" : "single_plane"; }

std::string to_string(Regularizer r) {
  switch (r) {
    case Regularizer::none: return "none";
    case Regularizer::tv2: return "tv2";
    case Regularizer::wtv2: return "wtv2";
    case Regularizer::tv1: return "tv1";
  }
  return "unknown";
}

Method parse_method(const std::string& s) {
  if (s == "sweep" || s == "sweep_only") return Method::sweep_only;
  if (s == "greedy" || s == "greedy_only") return Method::greedy_only;
  if (s == "continuous") return Method::continuous;
  if (s == "grid3d") return Method::grid3d;
  throw ConfigError("unknown method '" + s + "'");
}

InitKind parse_init(const std::string& s) {
  if (s == "greedy") return InitKind::greedy;
  if (s == "single_plane" || s == "sweep") return InitKind::single_plane;
  throw ConfigError("unknown init '" + s + "'");
}

Regularizer parse_regularizer(const std::string& s) {
  if (s == "none") return Regularizer::none;
  if (s == "tv2") return Regularizer::tv2;
  if (s == "wtv2") return Regularizer::wtv2;
  if (s == "tv1") return Regularizer::tv1;
  throw ConfigError("unknown regularizer '" + s + "'");
}

LbfgsOptions ReconConfig::default_depth_opts() {
  LbfgsOptions o;
  o.memory = 10;
  o.max_iter = 100;
  o.grad_tol = 1e-12;
  o.value_tol = 1e-13;
  return o;
}

CglsOptions ReconConfig::default_intensity_opts() {
  CglsOptions o;
  o.max_iter = 50;
  o.rel_tol = 1e-8;
  return o;
}

void ReconConfig::validate() const {
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
  if (!(sigma > 0.0)) throw ConfigError("sigma must be > 0");
  if (!(mu > 0.0)) throw ConfigError("mu must be > 0");
  if (outer_iters < 0) throw ConfigError("outer_iters must be >= 0");
  if (!(alpha_min > 0.0 && alpha_min < alpha_max && alpha_max < 1.0))
    throw ConfigError("alpha box must satisfy 0 < alpha_min < alpha_max < 1");
  if (greedy_iters < 0) throw ConfigError("greedy_iters must be >= 0");
  if (atoms_per_pixel < 2) throw ConfigError("atoms_per_pixel must be >= 2");
  if (bregman_iters < 1) throw ConfigError("bregman_iters must be >= 1");
  if (!(fista_lambda >= 0.0)) throw ConfigError("fista_lambda must be >= 0");
  if (fista_iters < 1) throw ConfigError("fista_iters must be >= 1");
  if (depth_opts.max_iter < 0 || intensity_opts.max_iter < 0)
    throw ConfigError("solver iteration limits must be >= 0");
  if (method == Method::grid3d && reg == Regularizer::tv1)
    throw ConfigError("grid3d does not support the tv1 regularizer");
  candidates.validate();
}

nlohmann::json ReconConfig::to_json() const {
  return {{"method", to_string(method)},
          {"init", to_string(init)},
          {"reg", to_string(reg)},
          {"lambda", lambda},
          {"sigma", sigma},
          {"mu", mu},
          {"outer_iters", outer_iters},
          {"outer_rel_tol", outer_rel_tol},
          {"depth_max_iter", depth_opts.max_iter},
          {"depth_memory", depth_opts.memory},
          {"depth_grad_tol", depth_opts.grad_tol},
          {"depth_value_tol", depth_opts.value_tol},
          {"intensity_max_iter", intensity_opts.max_iter},
          {"intensity_rel_tol", intensity_opts.rel_tol},
          {"candidates", candidates.alphas},
          {"alpha_min", alpha_min},
          {"alpha_max", alpha_max},
          {"greedy_iters", greedy_iters},
          {"atoms_per_pixel", atoms_per_pixel},
          {"greedy_min_decrease", greedy_min_decrease},
          {"bregman_iters", bregman_iters},
          {"bregman_tol", bregman_tol},
          {"fista_lambda", fista_lambda},
          {"fista_iters", fista_iters},
          {"single_plane_depth", single_plane_depth},
          {"freeze_intensity", freeze_intensity},
          {"nonneg_intensity", nonneg_intensity}};
}

ReconConfig ReconConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("reconstruction config must be a JSON object");
  ReconConfig c;
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "method") c.method = parse_method(v.get<std::string>());
      else if (key == "init") c.init = parse_init(v.get<std::string>());
      else if (key == "reg") c.reg = parse_regularizer(v.get<std::string>());
      else if (key == "lambda") c.lambda = v.get<double>();
      else if (key == "sigma") c.sigma = v.get<double>();
      else if (key == "mu") c.mu = v.get<double>();
      else if (key == "outer_iters") c.outer_iters = v.get<int>();
      else if (key == "outer_rel_tol") c.outer_rel_tol = v.get<double>();
      else if (key == "depth_max_iter") c.depth_opts.max_iter = v.get<int>();
      else if (key == "depth_memory") c.depth_opts.memory = v.get<int>();
      else if (key == "depth_grad_tol") c.depth_opts.grad_tol = v.get<double>();
      else if (key == "depth_value_tol") c.depth_opts.value_tol = v.get<double>();
      else if (key == "intensity_max_iter") c.intensity_opts.max_iter = v.get<int>();
      else if (key == "intensity_rel_tol") c.intensity_opts.rel_tol = v.get<double>();
      else if (key == "candidates") {
        if (v.is_string()) c.candidates = CandidateDepths::parse(v.get<std::string>());
        else c.candidates.alphas = v.get<std::vector<double>>();
      } else if (key == "alpha_min") c.alpha_min = v.get<double>();
      else if (key == "alpha_max") c.alpha_max = v.get<double>();
      else if (key == "greedy_iters") c.greedy_iters = v.get<int>();
      else if (key == "atoms_per_pixel") c.atoms_per_pixel = v.get<int>();
      else if (key == "greedy_min_decrease") c.greedy_min_decrease = v.get<double>();
      else if (key == "bregman_iters") c.bregman_iters = v.get<int>();
      else if (key == "bregman_tol") c.bregman_tol = v.get<double>();
      else if (key == "fista_lambda") c.fista_lambda = v.get<double>();
      else if (key == "fista_iters") c.fista_iters = v.get<int>();
      else if (key == "single_plane_depth") c.single_plane_depth = v.get<bool>();
      else if (key == "freeze_intensity") c.freeze_intensity = v.get<bool>();
      else if (key == "nonneg_intensity") c.nonneg_intensity = v.get<bool>();
      else throw ConfigError("unknown reconstruction key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("reconstruction key '" + key + "' has the wrong type");
    }
  }
  c.validate();
  return c;
}

MatrixXd solve_plane_intensity(const ForwardModel& model, const MatrixXd& y, double alpha,
                               const CglsOptions& opts, double* loss) {
  const MatrixXd basis = model.plane_basis(alpha);
  const Eigen::Index n = basis.cols();
  const LinearOp op = [&](const VectorXd& x) { return flat(plane_forward(basis, unflat(x, n, n))); };
  const LinearOp adj = [&](const VectorXd& r) {
    return flat(plane_adjoint(basis, unflat(r, y.rows(), y.cols())));
  };
  const CglsResult res = cg_normal_least_squares(op, adj, flat(y), VectorXd::Zero(n * n), opts);
  if (loss) *loss = 0.5 * (flat(y) - op(res.x)).squaredNorm();
  return unflat(res.x, n, n);
}

SweepResult sweep_init(const ForwardModel& model, const MatrixXd& y,
                       const CandidateDepths& candidates, const CglsOptions& opts) {
  candidates.validate();
  SweepResult out;
  double best = std::numeric_limits<double>::infinity();
  for (int k = 0; k < candidates.size(); ++k) {
    double loss = 0.0;
    MatrixXd l = solve_plane_intensity(model, y, candidates.alphas[k], opts, &loss);
    out.losses.push_back(loss);
    if (loss < best) {
      best = loss;
      out.best_index = k;
      out.intensity = std::move(l);
    }
  }
  out.alpha = candidates.alphas[out.best_index];
  return out;
}

namespace {

/// Sum over planes of B_d (X_d o A_d) B_d^T, with X stacked as D blocks of N*N.
class MultiPlaneOp {
 public:
  MultiPlaneOp(const std::vector<MatrixXd>& bases, const std::vector<MatrixXd>& masks, Eigen::Index m)
      : bases_(bases), masks_(masks), m_(m), n_(bases.front().cols()) {}

  VectorXd apply(const VectorXd& x) const {
    MatrixXd y = MatrixXd::Zero(m_, m_);
    for (std::size_t d = 0; d < bases_.size(); ++d) {
      if (!masks_[d].any()) continue;
      const MatrixXd xd = block(x, d).cwiseProduct(masks_[d]);
      y += plane_forward(bases_[d], xd);
    }
    return flat(y);
  }

  VectorXd adjoint(const VectorXd& r) const {
    const MatrixXd rm = unflat(r, m_, m_);
    VectorXd out = VectorXd::Zero(static_cast<Eigen::Index>(bases_.size()) * n_ * n_);
    for (std::size_t d = 0; d < bases_.size(); ++d) {
      if (!masks_[d].any()) continue;
      out.segment(static_cast<Eigen::Index>(d) * n_ * n_, n_ * n_) =
          flat(plane_adjoint(bases_[d], rm).cwiseProduct(masks_[d]));
    }
    return out;
  }

  MatrixXd block(const VectorXd& x, std::size_t d) const {
    return unflat(x.segment(static_cast<Eigen::Index>(d) * n_ * n_, n_ * n_), n_, n_);
  }

 private:
  const std::vector<MatrixXd>& bases_;
  const std::vector<MatrixXd>& masks_;
  Eigen::Index m_;
  Eigen::Index n_;
};

struct Assignment {
  Eigen::MatrixXi index;
  MatrixXd intensity;
};

std::vector<MatrixXd> masks_for(const Eigen::MatrixXi& index, int planes) {
  std::vector<MatrixXd> masks(planes, MatrixXd::Zero(index.rows(), index.cols()));
  for (Eigen::Index j = 0; j < index.cols(); ++j)
    for (Eigen::Index i = 0; i < index.rows(); ++i) masks[index(i, j)](i, j) = 1.0;
  return masks;
}

VectorXd stack_assignment(const Assignment& a, int planes) {
  const Eigen::Index nn = a.intensity.size();
  VectorXd x = VectorXd::Zero(planes * nn);
  for (Eigen::Index k = 0; k < nn; ++k) x[a.index(k) * nn + k] = a.intensity(k);
  return x;
}

/// Least squares with one atom per pixel; returns the residual norm.
double solve_assignment(const std::vector<MatrixXd>& bases, const MatrixXd& y, Assignment& a,
                        const CglsOptions& opts) {
  const int planes = static_cast<int>(bases.size());
  const std::vector<MatrixXd> masks = masks_for(a.index, planes);
  const MultiPlaneOp op(bases, masks, y.rows());
  const CglsResult res = cg_normal_least_squares(
      [&](const VectorXd& x) { return op.apply(x); },
      [&](const VectorXd& r) { return op.adjoint(r); }, flat(y), stack_assignment(a, planes), opts);
  const Eigen::Index nn = a.intensity.size();
  for (Eigen::Index k = 0; k < nn; ++k) a.intensity(k) = res.x[a.index(k) * nn + k];
  return res.residual_norms.back();
}

MatrixXd assignment_residual(const std::vector<MatrixXd>& bases, const MatrixXd& y,
                             const Assignment& a) {
  const std::vector<MatrixXd> masks = masks_for(a.index, static_cast<int>(bases.size()));
  const MultiPlaneOp op(bases, masks, y.rows());
  return y - unflat(op.apply(stack_assignment(a, static_cast<int>(bases.size()))), y.rows(), y.cols());
}

}  // namespace

Scene greedy_init(const ForwardModel& model, const MatrixXd& y, const CandidateDepths& candidates,
                  const GreedyOptions& opts, nlohmann::json* stage) {
  if (opts.atoms_per_pixel < 2) throw ConfigError("atoms_per_pixel must be >= 2");
  const SweepResult sweep = sweep_init(model, y, candidates, opts.cgls);
  const int planes = candidates.size();
  const Eigen::Index n = model.scene_pixels();
  const Eigen::Index nn = n * n;

  Assignment cur{Eigen::MatrixXi::Constant(n, n, sweep.best_index), sweep.intensity};
  if (planes == 1) {
    if (stage) *stage = {{"stage", "greedy"}, {"iterations", 0}, {"sweep_losses", sweep.losses}};
    return {cur.intensity, MatrixXd::Constant(n, n, sweep.alpha)};
  }

  const std::vector<MatrixXd> bases = plane_bases(model, candidates);
  std::vector<VectorXd> col_norms;
  for (const MatrixXd& b : bases) col_norms.push_back(b.colwise().norm().transpose());
  // overlap[d][c](i) = psi_i(d)^T psi_i(c); atom overlaps factor over rows and columns.
  std::vector<std::vector<VectorXd>> overlap(planes, std::vector<VectorXd>(planes));
  for (int d = 0; d < planes; ++d)
    for (int c = 0; c < planes; ++c)
      overlap[d][c] = bases[d].cwiseProduct(bases[c]).colwise().sum().transpose();

  double rnorm = std::sqrt(2.0 * sweep.losses[sweep.best_index]);
  std::vector<double> history{rnorm};
  int iterations = 0;
  int rejected = 0;
  std::string stop = "max_iter";
  // Per-pixel candidate pools; the current atom is always a member.
  std::vector<MatrixXd> masks = masks_for(cur.index, planes);
  for (int it = 0; it < opts.iters; ++it) {
    const MatrixXd r = assignment_residual(bases, y, cur);

    // Score each candidate against the residual with the pixel's own atom
    // added back, so nearly collinear neighbors of the true plane still rank
    // below it.
    std::vector<MatrixXd> corr(planes);
    for (int d = 0; d < planes; ++d) corr[d] = plane_adjoint(bases[d], r);
    std::vector<MatrixXd> score(planes, MatrixXd(n, n));
    for (Eigen::Index j = 0; j < n; ++j)
      for (Eigen::Index i = 0; i < n; ++i) {
        const int c = cur.index(i, j);
        for (int d = 0; d < planes; ++d) {
          const double own = cur.intensity(i, j) * overlap[d][c][i] * overlap[d][c][j];
          const double norm = std::max(col_norms[d][i] * col_norms[d][j], 1e-300);
          score[d](i, j) = std::abs(corr[d](i, j) + own) / norm;
        }
      }

    bool appended = false;
    for (Eigen::Index k = 0; k < nn; ++k) {
      int best = -1, weakest = -1, active = 0;
      for (int d = 0; d < planes; ++d) {
        if (masks[d](k) != 0.0) {
          ++active;
          if (d != cur.index(k) && (weakest < 0 || score[d](k) < score[weakest](k))) weakest = d;
        } else if (best < 0 || score[d](k) > score[best](k)) {
          best = d;
        }
      }
      if (best < 0) continue;
      if (active >= opts.atoms_per_pixel) {
        if (weakest < 0 || score[weakest](k) >= score[best](k)) continue;
        masks[weakest](k) = 0.0;
      }
      masks[best](k) = 1.0;
      appended = true;
    }
    if (!appended) {
      stop = "no_new_atoms";
      break;
    }

    const MultiPlaneOp op(bases, masks, y.rows());
    const CglsResult joint = cg_normal_least_squares(
        [&](const VectorXd& x) { return op.apply(x); },
        [&](const VectorXd& rr) { return op.adjoint(rr); }, flat(y),
        stack_assignment(cur, planes), opts.cgls);

    // Prune to the strongest atom per pixel, then refit.
    Assignment next = cur;
    for (Eigen::Index k = 0; k < nn; ++k) {
      double best_v = -1.0;
      for (int d = 0; d < planes; ++d) {
        if (masks[d](k) == 0.0) continue;
        const double v = std::abs(joint.x[d * nn + k]);
        if (v > best_v) {
          best_v = v;
          next.index(k) = d;
          next.intensity(k) = joint.x[d * nn + k];
        }
      }
    }
    const double next_norm = solve_assignment(bases, y, next, opts.cgls);
    ++iterations;
    if (next_norm > rnorm) {
      // Keep the enlarged pools; the next joint solve sees more candidates.
      ++rejected;
      continue;
    }
    const bool small = rnorm - next_norm < opts.min_decrease * rnorm;
    cur = std::move(next);
    rnorm = next_norm;
    history.push_back(rnorm);
    if (small) {
      stop = "small_decrease";
      break;
    }
  }

  Scene out;
  out.intensity = cur.intensity;
  out.inv_depth.resize(n, n);
  for (Eigen::Index k = 0; k < nn; ++k) out.inv_depth(k) = candidates.alphas[cur.index(k)];
  if (stage)
    *stage = {{"stage", "greedy"},
              {"iterations", iterations},
              {"rejected_prunes", rejected},
              {"stop", stop},
              {"residual_norms", history},
              {"sweep_losses", sweep.losses},
              {"sweep_alpha", sweep.alpha}};
  return out;
}

namespace {

double regularizer_value(const MatrixXd& alpha, const ReconConfig& cfg) {
  switch (cfg.reg) {
    case Regularizer::none: return 0.0;
    case Regularizer::tv2: return tv2_value_grad(alpha).value;
    case Regularizer::wtv2: return wtv2_potential(alpha, cfg.sigma);
    case Regularizer::tv1: return tv1_value(alpha);
  }
  return 0.0;
}

LbfgsOptions boxed(LbfgsOptions o, Eigen::Index size, double lo, double hi) {
  o.lower = VectorXd::Constant(size, lo);
  o.upper = VectorXd::Constant(size, hi);
  return o;
}

}  // namespace

double refine_objective(const ForwardModel& model, const MatrixXd& y, const Scene& scene,
                        const ReconConfig& cfg) {
  const double reg = cfg.lambda > 0.0 ? cfg.lambda * regularizer_value(scene.inv_depth, cfg) : 0.0;
  return model.data_loss(y, scene) + reg;
}

SplitBregmanResult split_bregman_tv1(const MapOracle& data, const MatrixXd& alpha0,
                                     const SplitBregmanOptions& opts) {
  if (!(opts.lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
  const Eigen::Index n = alpha0.rows();
  if (alpha0.cols() != n || n < 2) throw ConfigError("split Bregman needs a square map, n >= 2");
  SplitState st = SplitState::zeros(static_cast<int>(n), opts.mu);
  SplitBregmanResult out;
  out.alpha = alpha0;

  // Start the split at the current gradients so d = grad a holds from the outset.
  st.d_r = shrink(grad_r(alpha0), opts.lambda / opts.mu);
  st.d_c = shrink(grad_c(alpha0), opts.lambda / opts.mu);

  auto objective = [&](const MatrixXd& a) {
    MatrixXd g;
    return data(a, g) + opts.lambda * tv1_value(a);
  };
  out.objective_history.push_back(objective(out.alpha));

  const ObjectiveOracle sub = [&](const VectorXd& x, VectorXd& grad) {
    const MatrixXd a = unflat(x, n, n);
    MatrixXd g;
    double v = data(a, g);
    const ValueGrad c = split_coupling_value_grad(a, st);
    grad = flat(g + c.grad);
    return v + c.value;
  };

  for (int it = 0; it < opts.max_iters; ++it) {
    const LbfgsResult res = lbfgs_minimize(sub, flat(out.alpha), opts.inner);
    out.alpha = unflat(res.x, n, n);
    bregman_update(out.alpha, opts.lambda, st);
    ++out.iterations;
    out.objective_history.push_back(objective(out.alpha));
    out.constraint_residual = split_constraint_residual(out.alpha, st);
    const double gnorm =
        std::sqrt(grad_r(out.alpha).squaredNorm() + grad_c(out.alpha).squaredNorm());
    out.relative_residual = gnorm > 0.0 ? out.constraint_residual / gnorm
                                        : (out.constraint_residual > 0.0 ? 1.0 : 0.0);
    if (out.relative_residual <= opts.tol) break;
  }
  return out;
}

ReconResult refine(const ForwardModel& model, const MatrixXd& y, const Scene& init,
                   const ReconConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const Eigen::Index n = model.scene_pixels();
  init.validate(static_cast<int>(n));

  ReconResult out;
  Scene cur = init;
  cur.inv_depth = cur.inv_depth.cwiseMax(cfg.alpha_min).cwiseMin(cfg.alpha_max);
  if (cfg.single_plane_depth) cur.inv_depth.setConstant(cur.inv_depth.mean());

  auto objective = [&](const Scene& s) {
    const double v = refine_objective(model, y, s, cfg);
    if (!std::isfinite(v)) throw DomainError("refinement objective became non-finite");
    return v;
  };
  double obj = objective(cur);
  out.objective_history.push_back(obj);

  // Depth data term at fixed intensity.
  const MapOracle data_term = [&](const MatrixXd& a, MatrixXd& grad) {
    return model.loss_and_depth_gradient(y, Scene{cur.intensity, a}, grad);
  };

  nlohmann::json outer = nlohmann::json::array();
  std::string stop = "max_outer";
  for (int k = 0; k < cfg.outer_iters; ++k) {
    const double start_obj = obj;
    nlohmann::json rec = {{"outer", k + 1}};

    // Depth half-step.
    MatrixXd alpha_new;
    if (cfg.single_plane_depth) {
      const ObjectiveOracle oracle = [&](const VectorXd& x, VectorXd& grad) {
        MatrixXd g;
        const double v = data_term(MatrixXd::Constant(n, n, x[0]), g);
        grad = VectorXd::Constant(1, g.sum());
        return v;
      };
      const LbfgsResult res = lbfgs_minimize(
          oracle, VectorXd::Constant(1, cur.inv_depth(0, 0)),
          boxed(cfg.depth_opts, 1, cfg.alpha_min, cfg.alpha_max));
      alpha_new = MatrixXd::Constant(n, n, res.x[0]);
      rec["depth"] = solve_report_json(res.report);
    } else if (cfg.reg == Regularizer::tv1 && cfg.lambda > 0.0) {
      SplitBregmanOptions sb;
      sb.lambda = cfg.lambda;
      sb.mu = cfg.mu;
      sb.max_iters = cfg.bregman_iters;
      sb.tol = cfg.bregman_tol;
      sb.inner = boxed(cfg.depth_opts, n * n, cfg.alpha_min, cfg.alpha_max);
      const SplitBregmanResult res = split_bregman_tv1(data_term, cur.inv_depth, sb);
      alpha_new = res.alpha;
      rec["depth"] = {{"bregman_iterations", res.iterations},
                      {"constraint_residual", res.constraint_residual},
                      {"relative_residual", res.relative_residual}};
    } else {
      TvWeights weights;
      if (cfg.reg == Regularizer::wtv2) weights = compute_weights(cur.inv_depth, cfg.sigma);
      const ObjectiveOracle oracle = [&](const VectorXd& x, VectorXd& grad) {
        const MatrixXd a = unflat(x, n, n);
        MatrixXd g;
        double v = data_term(a, g);
        if (cfg.lambda > 0.0 && cfg.reg != Regularizer::none) {
          const ValueGrad r =
              cfg.reg == Regularizer::wtv2 ? wtv2_value_grad(a, weights) : tv2_value_grad(a);
          v += cfg.lambda * r.value;
          g += cfg.lambda * r.grad;
        }
        grad = flat(g);
        return v;
      };
      const LbfgsResult res = lbfgs_minimize(
          oracle, flat(cur.inv_depth), boxed(cfg.depth_opts, n * n, cfg.alpha_min, cfg.alpha_max));
      alpha_new = unflat(res.x, n, n);
      rec["depth"] = solve_report_json(res.report);
    }
    Scene trial{cur.intensity, alpha_new};
    double trial_obj = objective(trial);
    const bool depth_ok = trial_obj <= obj;
    if (depth_ok) {
      cur = std::move(trial);
      obj = trial_obj;
    }
    rec["depth_accepted"] = depth_ok;
    out.objective_history.push_back(obj);

    // Intensity half-step.
    if (!cfg.freeze_intensity) {
      const LinearOp op = [&](const VectorXd& x) {
        return flat(model.forward(Scene{unflat(x, n, n), cur.inv_depth}));
      };
      const LinearOp adj = [&](const VectorXd& r) {
        return flat(model.adjoint(cur.inv_depth, unflat(r, y.rows(), y.cols())));
      };
      const CglsResult res =
          cg_normal_least_squares(op, adj, flat(y), flat(cur.intensity), cfg.intensity_opts);
      Scene next{unflat(res.x, n, n), cur.inv_depth};
      if (cfg.nonneg_intensity) next.intensity = next.intensity.cwiseMax(0.0);
      const double next_obj = objective(next);
      const bool ok = next_obj <= obj;
      if (ok) {
        cur = std::move(next);
        obj = next_obj;
      }
      rec["intensity"] = {{"iterations", res.iterations}, {"converged", res.converged},
                          {"accepted", ok}};
      out.objective_history.push_back(obj);
    }
    rec["objective"] = obj;
    outer.push_back(rec);
    if (start_obj - obj <= cfg.outer_rel_tol * std::abs(start_obj)) {
      stop = "small_decrease";
      break;
    }
  }
  out.scene = std::move(cur);
  out.stages.push_back({{"stage", "refine"}, {"reg", to_string(cfg.reg)}, {"stop", stop},
                        {"outer", outer}});
  out.wall_time_s = seconds_since(t0);
  return out;
}

Grid3dResult grid3d_baseline(const ForwardModel& model, const MatrixXd& y,
                             const CandidateDepths& candidates, const FistaOptions& opts) {
  candidates.validate();
  if (!(opts.lambda1 >= 0.0)) throw ConfigError("lambda1 must be >= 0");
  const int planes = candidates.size();
  const Eigen::Index n = model.scene_pixels();
  const Eigen::Index nn = n * n;
  const std::vector<MatrixXd> bases = plane_bases(model, candidates);
  const std::vector<MatrixXd> masks(planes, MatrixXd::Ones(n, n));
  const MultiPlaneOp op(bases, masks, y.rows());
  const VectorXd yv = flat(y);

  // Lipschitz constant of the data gradient by power iteration on A^T A.
  std::mt19937_64 rng(7);
  std::normal_distribution<double> gauss;
  VectorXd v = VectorXd::NullaryExpr(planes * nn, [&] { return gauss(rng); });
  double lip = 0.0;
  for (int k = 0; k < opts.power_iters; ++k) {
    v.normalize();
    const VectorXd w = op.adjoint(op.apply(v));
    lip = w.norm();
    v = w;
  }
  lip = std::max(lip * 1.05, 1e-300);

  auto objective = [&](const VectorXd& x) {
    return 0.5 * (op.apply(x) - yv).squaredNorm() + opts.lambda1 * x.cwiseAbs().sum();
  };

  Grid3dResult out;
  VectorXd x = VectorXd::Zero(planes * nn);
  VectorXd z = x;
  double t = 1.0;
  double f = objective(x);
  out.objective_history.push_back(f);
  bool restarted = false;
  for (int it = 0; it < opts.max_iter; ++it) {
    const VectorXd grad = op.adjoint(op.apply(z) - yv);
    const VectorXd xn = (z - grad / lip).array() - opts.lambda1 / lip;
    const VectorXd xp = xn.cwiseMax(0.0);
    const double fn = objective(xp);
    if (fn > f) {
      // Restart momentum; a plain proximal step from x cannot increase f unless L is too small.
      if (restarted) lip *= 2.0;
      z = x;
      t = 1.0;
      restarted = true;
      continue;
    }
    restarted = false;
    const double tn = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    z = xp + ((t - 1.0) / tn) * (xp - x);
    x = xp;
    t = tn;
    const double prev = f;
    f = fn;
    out.objective_history.push_back(f);
    if (prev - f <= opts.rel_tol * std::max(prev, 1e-300)) break;
  }

  out.volume = unflat(x, nn, planes).transpose();
  out.scene.intensity.resize(n, n);
  out.scene.inv_depth.resize(n, n);
  for (Eigen::Index k = 0; k < nn; ++k) {
    Eigen::Index best = 0;
    out.volume.col(k).maxCoeff(&best);
    out.scene.intensity(k) = out.volume(best, k);
    out.scene.inv_depth(k) = candidates.alphas[best];
  }
  return out;
}

Metrics evaluate(const Scene& est, const Scene& gt, const CameraGeometry& geom, double threshold) {
  const Eigen::Index n = gt.intensity.rows();
  if (est.intensity.rows() != n || est.intensity.cols() != gt.intensity.cols() ||
      est.inv_depth.rows() != n || est.inv_depth.cols() != gt.inv_depth.cols())
    throw ConfigError("estimate and ground truth differ in size");
  Metrics m;
  const double mse = (est.intensity - gt.intensity).squaredNorm() / double(gt.intensity.size());
  m.psnr_db = mse > 0.0 ? std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse)) : kPsnrCap;

  const double d = geom.mask_sensor_distance_m;
  double sum = 0.0;
  Eigen::Index count = 0;
  for (Eigen::Index k = 0; k < gt.inv_depth.size(); ++k) {
    if (threshold > 0.0 && !(gt.intensity(k) > threshold)) continue;
    const double e = depth_from_alpha(est.inv_depth(k), d) - depth_from_alpha(gt.inv_depth(k), d);
    sum += e * e;
    ++count;
  }
  if (count == 0) throw ConfigError("no pixel passes the depth-error intensity threshold");
  m.depth_rmse_m = std::sqrt(sum / double(count));
  return m;
}

ReconResult reconstruct(const ForwardModel& model, const MatrixXd& y, const ReconConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const Eigen::Index n = model.scene_pixels();
  ReconResult out;

  switch (cfg.method) {
    case Method::sweep_only: {
      const SweepResult s = sweep_init(model, y, cfg.candidates, cfg.intensity_opts);
      out.scene = {s.intensity, MatrixXd::Constant(n, n, s.alpha)};
      out.stages.push_back({{"stage", "sweep"}, {"losses", s.losses}, {"alpha", s.alpha}});
      out.objective_history.push_back(model.data_loss(y, out.scene));
      break;
    }
    case Method::greedy_only: {
      nlohmann::json st;
      GreedyOptions g{cfg.greedy_iters, cfg.atoms_per_pixel, cfg.greedy_min_decrease,
                      cfg.intensity_opts};
      out.scene = greedy_init(model, y, cfg.candidates, g, &st);
      out.stages.push_back(st);
      out.objective_history.push_back(model.data_loss(y, out.scene));
      break;
    }
    case Method::continuous: {
      Scene init;
      if (cfg.init == InitKind::greedy) {
        nlohmann::json st;
        GreedyOptions g{cfg.greedy_iters, cfg.atoms_per_pixel, cfg.greedy_min_decrease,
                        cfg.intensity_opts};
        init = greedy_init(model, y, cfg.candidates, g, &st);
        out.stages.push_back(st);
      } else {
        const SweepResult s = sweep_init(model, y, cfg.candidates, cfg.intensity_opts);
        init = {s.intensity, MatrixXd::Constant(n, n, s.alpha)};
        out.stages.push_back({{"stage", "sweep"}, {"losses", s.losses}, {"alpha", s.alpha}});
      }
      ReconResult r = refine(model, y, init, cfg);
      out.scene = std::move(r.scene);
      out.objective_history = std::move(r.objective_history);
      for (auto& s : r.stages) out.stages.push_back(std::move(s));
      break;
    }
    case Method::grid3d: {
      FistaOptions f;
      f.lambda1 = cfg.fista_lambda;
      f.max_iter = cfg.fista_iters;
      Grid3dResult g = grid3d_baseline(model, y, cfg.candidates, f);
      out.scene = std::move(g.scene);
      out.objective_history = std::move(g.objective_history);
      out.stages.push_back({{"stage", "grid3d"}, {"iterations", out.objective_history.size() - 1}});
      break;
    }
  }
  out.wall_time_s = seconds_since(t0);
  return out;
}

SyntheticScene make_synthetic_scene(const SyntheticSpec& spec) {
  if (spec.n < 2) throw ConfigError("synthetic scene needs n >= 2");
  if (!(spec.z_near_m > 0.0 && spec.z_far_m > spec.z_near_m))
    throw ConfigError("synthetic scene needs 0 < z_near < z_far");
  const int n = spec.n;
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  // Sum of a few low-frequency cosines, rescaled to [0.2, 1].
  MatrixXd tex = MatrixXd::Zero(n, n);
  for (int k = 0; k < 6; ++k) {
    const double fu = 0.5 + 3.0 * unif(rng), fv = 0.5 + 3.0 * unif(rng);
    const double pu = 2.0 * M_PI * unif(rng), pv = 2.0 * M_PI * unif(rng);
    const double amp = 0.5 + unif(rng);
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < n; ++i)
        tex(i, j) += amp * std::cos(2.0 * M_PI * fu * i / n + pu) * std::cos(2.0 * M_PI * fv * j / n + pv);
  }
  const double lo = tex.minCoeff(), hi = tex.maxCoeff();
  SyntheticScene out;
  out.intensity = hi > lo ? MatrixXd((0.2 + 0.8 * (tex.array() - lo) / (hi - lo)).min(1.0).matrix())
                          : MatrixXd::Constant(n, n, 0.6);

  const double zn = spec.z_near_m, zf = spec.z_far_m;
  out.depth_m.resize(n, n);
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < n; ++i) {
      if (spec.kind == "ramp_step") {
        out.depth_m(i, j) = j < n / 2 ? zn + (0.1 + 0.45 * i / (n - 1)) * (zf - zn)
                                      : zn + 0.93 * (zf - zn);
      } else if (spec.kind == "plane") {
        out.depth_m(i, j) = 0.5 * (zn + zf);
      } else if (spec.kind == "two_plane") {
        out.depth_m(i, j) = j < n / 2 ? zn : zf;
      } else {
        throw ConfigError("unknown synthetic scene kind '" + spec.kind + "'");
      }
    }
  }
  return out;
}

}  // namespace l3d
