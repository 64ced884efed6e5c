#include "l3d/solvers.hpp"

#include "l3d/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <random>

namespace l3d {

std::string to_string(Termination t) {
  switch (t) {
    case Termination::converged_grad: return "converged_grad";
    case Termination::converged_step: return "converged_step";
    case Termination::max_iter: return "max_iter";
    case Termination::line_search_failed: return "line_search_failed";
  }
  return "unknown";
}

namespace {

struct Box {
  const Eigen::VectorXd* lower = nullptr;
  const Eigen::VectorXd* upper = nullptr;

  bool active() const { return lower != nullptr; }

  Eigen::VectorXd project(const Eigen::VectorXd& x) const {
    if (!active()) return x;
    return x.cwiseMax(*lower).cwiseMin(*upper);
  }

  // Zero the direction where a coordinate sits on a bound and would leave it.
  void restrict_direction(const Eigen::VectorXd& x, Eigen::VectorXd& p) const {
    if (!active()) return;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      if ((x[i] <= (*lower)[i] && p[i] < 0.0) || (x[i] >= (*upper)[i] && p[i] > 0.0)) p[i] = 0.0;
    }
  }

  double projected_grad_norm(const Eigen::VectorXd& x, const Eigen::VectorXd& g) const {
    if (!active()) return g.cwiseAbs().maxCoeff();
    return (x - project(x - g)).cwiseAbs().maxCoeff();
  }
};

struct Point {
  double t = 0.0;
  Eigen::VectorXd x;
  double f = 0.0;
  Eigen::VectorXd g;
  double d = 0.0;  // derivative of f along the projected path
};

class LineSearch {
 public:
  LineSearch(const ObjectiveOracle& oracle, const Box& box, const LbfgsOptions& opts,
             const Point& start, const Eigen::VectorXd& dir, int& evaluations, bool& clipped)
      : oracle_(oracle), box_(box), opts_(opts), start_(start), dir_(dir), evals_(evaluations),
        clipped_(clipped) {}

  // Returns the accepted point, or nullopt if no point decreased f.
  std::optional<Point> run(double t_init) {
    // The bracket starts at t = 0 whatever step produced start_.
    Point prev = start_;
    prev.t = 0.0;
    double t = t_init;
    for (int it = 0; it < opts_.max_linesearch; ++it) {
      Point cur = eval(t);
      if (!std::isfinite(cur.f)) {
        t = 0.5 * (prev.t + t);
        continue;
      }
      if (cur.f > armijo(cur.t) || (it > 0 && cur.f >= prev.f)) return zoom(prev, cur);
      if (std::abs(cur.d) <= -opts_.c2 * start_.d) return cur;
      if (cur.d >= 0.0) return zoom(cur, prev);
      prev = cur;
      t *= 2.0;
    }
    return fallback();
  }

 private:
  double armijo(double t) const { return start_.f + opts_.c1 * t * start_.d; }

  Point eval(double t) {
    Point p;
    p.t = t;
    const Eigen::VectorXd raw = start_.x + t * dir_;
    p.x = box_.project(raw);
    p.f = oracle_(p.x, p.g);
    ++evals_;
    Eigen::VectorXd eff = dir_;
    if (box_.active()) {
      for (Eigen::Index i = 0; i < raw.size(); ++i) {
        if (p.x[i] != raw[i]) {
          eff[i] = 0.0;
          clipped_ = true;
        }
      }
    }
    p.d = std::isfinite(p.f) ? p.g.dot(eff) : std::numeric_limits<double>::quiet_NaN();
    remember(p);
    return p;
  }

  void remember(const Point& p) {
    if (std::isfinite(p.f) && p.f < start_.f && (!best_ || p.f < best_->f)) best_ = p;
  }

  std::optional<Point> fallback() const {
    if (best_ && best_->f <= armijo(best_->t)) return best_;
    return std::nullopt;
  }

  std::optional<Point> zoom(Point lo, Point hi) {
    for (int it = 0; it < opts_.max_linesearch; ++it) {
      const double a = std::min(lo.t, hi.t), b = std::max(lo.t, hi.t);
      double t = cubic_min(lo, hi);
      const double margin = 0.1 * (b - a);
      if (!std::isfinite(t) || t < a + margin || t > b - margin) t = 0.5 * (a + b);
      if (b - a < 1e-16 * std::max(1.0, b)) break;
      Point cur = eval(t);
      if (!std::isfinite(cur.f) || cur.f > armijo(cur.t) || cur.f >= lo.f) {
        hi = cur;
      } else {
        if (std::abs(cur.d) <= -opts_.c2 * start_.d) return cur;
        if (cur.d * (hi.t - lo.t) >= 0.0) hi = lo;
        lo = cur;
      }
    }
    return fallback();
  }

  static double cubic_min(const Point& p, const Point& q) {
    if (!std::isfinite(p.d) || !std::isfinite(q.d) || !std::isfinite(q.f))
      return std::numeric_limits<double>::quiet_NaN();
    const double d1 = p.d + q.d - 3.0 * (p.f - q.f) / (p.t - q.t);
    const double disc = d1 * d1 - p.d * q.d;
    if (disc < 0.0) return std::numeric_limits<double>::quiet_NaN();
    const double d2 = std::copysign(std::sqrt(disc), q.t - p.t);
    return q.t - (q.t - p.t) * (q.d + d2 - d1) / (q.d - p.d + 2.0 * d2);
  }

  const ObjectiveOracle& oracle_;
  const Box& box_;
  const LbfgsOptions& opts_;
  const Point& start_;
  const Eigen::VectorXd& dir_;
  int& evals_;
  bool& clipped_;
  std::optional<Point> best_;
};

}  // namespace

LbfgsResult lbfgs_minimize(const ObjectiveOracle& oracle, const Eigen::VectorXd& x0,
                           const LbfgsOptions& opts) {
  if (opts.lower.has_value() != opts.upper.has_value())
    throw ConfigError("L-BFGS box needs both lower and upper bounds");
  if (opts.memory < 1) throw ConfigError("L-BFGS memory must be >= 1");
  Box box;
  if (opts.lower) {
    if (opts.lower->size() != x0.size() || opts.upper->size() != x0.size())
      throw ConfigError("L-BFGS bounds must match the problem size");
    box.lower = &*opts.lower;
    box.upper = &*opts.upper;
  }

  LbfgsResult result;
  SolveReport& rep = result.report;
  Point cur;
  cur.x = box.project(x0);
  rep.projected = box.active() && cur.x != x0;
  cur.f = oracle(cur.x, cur.g);
  rep.evaluations = 1;
  if (!std::isfinite(cur.f) || !cur.g.allFinite())
    throw DomainError("L-BFGS: objective or gradient is not finite at the starting point");
  rep.value_history.push_back(cur.f);

  std::deque<Eigen::VectorXd> s_hist, y_hist;
  std::deque<double> rho_hist;
  rep.termination = Termination::max_iter;

  for (int iter = 0;; ++iter) {
    rep.grad_norm = box.projected_grad_norm(cur.x, cur.g);
    if (rep.grad_norm < opts.grad_tol) {
      rep.termination = Termination::converged_grad;
      break;
    }
    if (iter >= opts.max_iter) break;

    // Two-loop recursion.
    Eigen::VectorXd q = cur.g;
    std::vector<double> coef(s_hist.size());
    for (std::size_t k = s_hist.size(); k-- > 0;) {
      coef[k] = rho_hist[k] * s_hist[k].dot(q);
      q -= coef[k] * y_hist[k];
    }
    if (!s_hist.empty()) q *= s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
    for (std::size_t k = 0; k < s_hist.size(); ++k) {
      const double beta = rho_hist[k] * y_hist[k].dot(q);
      q += (coef[k] - beta) * s_hist[k];
    }
    Eigen::VectorXd dir = -q;
    box.restrict_direction(cur.x, dir);
    double t_init = 1.0;
    if (s_hist.empty() || !(dir.dot(cur.g) < 0.0)) {
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
      dir = -cur.g;
      box.restrict_direction(cur.x, dir);
      t_init = std::min(1.0, 1.0 / cur.g.cwiseAbs().sum());
    }
    cur.d = cur.g.dot(dir);
    if (!(cur.d < 0.0)) {
      rep.termination = Termination::converged_grad;
      break;
    }

    LineSearch ls(oracle, box, opts, cur, dir, rep.evaluations, rep.projected);
    std::optional<Point> next = ls.run(t_init);
    if (!next) {
      rep.termination = Termination::line_search_failed;
      break;
    }

    Eigen::VectorXd s = next->x - cur.x;
    Eigen::VectorXd y = next->g - cur.g;
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      if (static_cast<int>(s_hist.size()) == opts.memory) {
        s_hist.pop_front();
        y_hist.pop_front();
        rho_hist.pop_front();
      }
      s_hist.push_back(s);
      y_hist.push_back(y);
      rho_hist.push_back(1.0 / sy);
    }
    const double prev_f = cur.f;
    cur = std::move(*next);
    ++rep.iterations;
    rep.value_history.push_back(cur.f);

    if (s.cwiseAbs().maxCoeff() < opts.step_tol) {
      rep.grad_norm = box.projected_grad_norm(cur.x, cur.g);
      rep.termination = Termination::converged_step;
      break;
    }
    if (opts.value_tol > 0.0 &&
        prev_f - cur.f <= opts.value_tol * std::max(std::abs(prev_f), 1e-300)) {
      rep.grad_norm = box.projected_grad_norm(cur.x, cur.g);
      rep.termination = Termination::converged_step;
      break;
    }
  }
  rep.final_value = cur.f;
  result.x = std::move(cur.x);
  return result;
}

CglsResult cg_normal_least_squares(const LinearOp& apply_op, const LinearOp& apply_adjoint,
                                   const Eigen::VectorXd& y, const Eigen::VectorXd& x0,
                                   const CglsOptions& opts) {
  if (opts.check_adjoint) {
    std::mt19937_64 rng(0x5eed);
    std::normal_distribution<double> gauss;
    Eigen::VectorXd xr = Eigen::VectorXd::NullaryExpr(x0.size(), [&] { return gauss(rng); });
    Eigen::VectorXd rr = Eigen::VectorXd::NullaryExpr(y.size(), [&] { return gauss(rng); });
    const double lhs = apply_op(xr).dot(rr);
    const double rhs = xr.dot(apply_adjoint(rr));
    if (std::abs(lhs - rhs) > 1e-8 * (std::abs(lhs) + std::abs(rhs) + 1e-300))
      throw ConfigError("CGLS: operator and adjoint are inconsistent");
  }

  CglsResult out;
  out.x = x0;
  Eigen::VectorXd r = y - apply_op(out.x);
  Eigen::VectorXd s = apply_adjoint(r);
  out.residual_norms.push_back(r.norm());
  const double ref = apply_adjoint(y).norm();
  if (ref == 0.0 || s.norm() <= opts.rel_tol * ref) {
    out.converged = true;
    return out;
  }
  Eigen::VectorXd p = s;
  double gamma = s.squaredNorm();
  for (int k = 0; k < opts.max_iter; ++k) {
    const Eigen::VectorXd qv = apply_op(p);
    const double qq = qv.squaredNorm();
    if (qq == 0.0) break;
    const double step = gamma / qq;
    out.x += step * p;
    r -= step * qv;
    s = apply_adjoint(r);
    ++out.iterations;
    out.residual_norms.push_back(r.norm());
    const double gamma_next = s.squaredNorm();
    if (std::sqrt(gamma_next) <= opts.rel_tol * ref) {
      out.converged = true;
      break;
    }
    p = s + (gamma_next / gamma) * p;
    gamma = gamma_next;
  }
  return out;
}

}  // namespace l3d
