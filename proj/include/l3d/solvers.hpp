#pragma once

#include <Eigen/Dense>

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace l3d {

/// Returns f(x) and writes the gradient into `grad` (resized by the callee).
using ObjectiveOracle = std::function<double(const Eigen::VectorXd& x, Eigen::VectorXd& grad)>;

enum class Termination { converged_grad, converged_step, max_iter, line_search_failed };

std::string to_string(Termination t);

struct SolveReport {
  int iterations = 0;
  int evaluations = 0;
  double final_value = 0.0;
  /// Infinity norm of the projected gradient at the returned point.
  double grad_norm = 0.0;
  Termination termination = Termination::max_iter;
  /// Objective at x0 followed by the value after each accepted step.
  std::vector<double> value_history;
  /// True if any iterate was clipped by the box.
  bool projected = false;
};

struct LbfgsOptions {
  int memory = 10;
  int max_iter = 100;
  /// Stop when the projected gradient's infinity norm drops below this.
  double grad_tol = 1e-8;
  /// Stop when an accepted step moves no coordinate by more than this.
  double step_tol = 1e-14;
  /// Stop when the relative decrease of f over one step is below this.
  double value_tol = 0.0;
  double c1 = 1e-4;
  double c2 = 0.9;
  int max_linesearch = 40;
  /// Optional box; both must be set together.
  std::optional<Eigen::VectorXd> lower;
  std::optional<Eigen::VectorXd> upper;
};

struct LbfgsResult {
  Eigen::VectorXd x;
  SolveReport report;
};

/// Limited-memory BFGS with a strong-Wolfe line search along the projected
/// path P(x + t p) when a box is given. Throws DomainError if f or its
/// gradient is non-finite at x0.
LbfgsResult lbfgs_minimize(const ObjectiveOracle& oracle, const Eigen::VectorXd& x0,
                           const LbfgsOptions& opts = {});

using LinearOp = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

struct CglsOptions {
  int max_iter = 100;
  /// Stop when ||A^T r|| / ||A^T y|| < rel_tol.
  double rel_tol = 1e-10;
  /// Probe <A x, r> = <x, A^T r> on random vectors before iterating.
  bool check_adjoint = false;
};

struct CglsResult {
  Eigen::VectorXd x;
  int iterations = 0;
  bool converged = false;
  /// ||y - A x_k|| for k = 0 .. iterations.
  std::vector<double> residual_norms;
};

/// Conjugate gradients on the normal equations A^T A x = A^T y.
CglsResult cg_normal_least_squares(const LinearOp& apply_op, const LinearOp& apply_adjoint,
                                   const Eigen::VectorXd& y, const Eigen::VectorXd& x0,
                                   const CglsOptions& opts = {});

}  // namespace l3d
