#pragma once

// Feasible SQP solver.
//
// Outer iterations refresh all derivatives at the current iterate y~ and keep
// them frozen; inner iterations re-evaluate only the constraint residuals at
// the moving point y^ and solve QPs with the perturbed gradient
//
//   a(y~, y^) = grad f(y~) + P (y^ - y~),
//
// so a converged inner loop lands on a nonlinearly feasible point. The same
// machinery also provides a real-time-iteration step (one conventional QP per
// call, no feasibility guarantee) and a converged conventional SQP loop used
// for offline problems.

#include <racer/config.hpp>
#include <racer/nlp.hpp>
#include <racer/qp.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

namespace racer {

struct Iterate {
  Eigen::VectorXd y;
  Eigen::VectorXd lambda;  // equality multipliers
  Eigen::VectorXd mu;      // inequality multipliers

  static Iterate cold(const NlpProblem& nlp, const Eigen::VectorXd& y0) {
    Iterate z;
    z.y = y0;
    z.lambda = Eigen::VectorXd::Zero(nlp.n_eq());
    z.mu = Eigen::VectorXd::Zero(nlp.n_ineq());
    return z;
  }
};

// Aggregate constraint violation: root of summed squared equality residuals
// and squared positive inequality parts.
inline double constraint_violation(const Eigen::VectorXd& g,
                                   const Eigen::VectorXd& h) {
  double s = g.squaredNorm();
  for (int i = 0; i < h.size(); ++i)
    if (h[i] > 0.0) s += h[i] * h[i];
  return std::sqrt(s);
}

inline double constraint_violation(const NlpProblem& nlp,
                                   const Eigen::VectorXd& y) {
  return constraint_violation(nlp.eval_g(y), nlp.eval_h(y));
}

// Worst nonlinear constraint violation: max(||g||_inf, max_i h_i, 0).
inline double feasibility_certificate(const NlpProblem& nlp,
                                      const Eigen::VectorXd& y) {
  double c = 0.0;
  const Eigen::VectorXd g = nlp.eval_g(y);
  if (g.size() > 0) c = g.lpNorm<Eigen::Infinity>();
  const Eigen::VectorXd h = nlp.eval_h(y);
  if (h.size() > 0) c = std::max(c, h.maxCoeff());
  return std::max(c, 0.0);
}

struct OuterRecord {
  int inner_iterations = 0;
  double step_norm = 0.0;     // ||Delta z|| of the last accepted inner step
  double objective = 0.0;     // f at the iterate after this outer iteration
  double feasibility = 0.0;   // certificate after this outer iteration
  double time_ms = 0.0;       // wall time of the outer iteration
  bool inner_converged = false;
  QpStatus qp_status = QpStatus::optimal;
};

struct SolveResult {
  Iterate z;
  bool converged = false;   // every outer iteration's inner loop converged
  bool feasible = false;    // certificate <= feas_tol at the returned iterate
  double certificate = 0.0;
  int outer_iterations = 0;
  std::vector<OuterRecord> records;
};

class FsqpSolver {
 public:
  explicit FsqpSolver(SolverSettings settings = {}) : settings_(settings) {}

  const SolverSettings& settings() const { return settings_; }
  SolverSettings& settings() { return settings_; }

  // Algorithm: feasible SQP. Requires a feasible starting iterate for the
  // feasibility-anytime property; the returned iterate is the last one whose
  // inner loop converged (the starting point if none did).
  SolveResult solve(const NlpProblem& nlp, const Iterate& z0) {
    SolveResult result;
    result.z = z0;
    Iterate z = z0;
    for (int outer = 0; outer < settings_.i_max; ++outer) {
      const auto t0 = clock_t::now();
      OuterRecord rec;
      Iterate z_next = z;
      const bool ok = inner_loop(nlp, z, z_next, rec);
      rec.time_ms = ms_since(t0);
      rec.objective = nlp.objective(ok ? z_next.y : z.y);
      rec.feasibility = feasibility_certificate(nlp, ok ? z_next.y : z.y);
      result.records.push_back(rec);
      ++result.outer_iterations;
      if (!ok) {
        result.converged = false;
        finish(nlp, z, result);
        return result;
      }
      z = z_next;
      result.converged = true;
      // Already at a fixed point: a derivative refresh would reproduce it.
      if (rec.inner_iterations == 1 && rec.step_norm < settings_.eps_tol) break;
    }
    finish(nlp, z, result);
    return result;
  }

  // One conventional SQP step per outer iteration: derivatives and residuals
  // both at the current point, full step, no inner loop.
  SolveResult rti_solve(const NlpProblem& nlp, const Iterate& z0) {
    SolveResult result;
    Iterate z = z0;
    for (int outer = 0; outer < settings_.i_max; ++outer) {
      const auto t0 = clock_t::now();
      OuterRecord rec;
      rec.qp_status = sqp_step(nlp, z, rec.step_norm);
      rec.inner_iterations = 1;
      rec.inner_converged = rec.qp_status == QpStatus::optimal;
      rec.time_ms = ms_since(t0);
      rec.objective = nlp.objective(z.y);
      rec.feasibility = feasibility_certificate(nlp, z.y);
      result.records.push_back(rec);
      ++result.outer_iterations;
      result.converged = rec.inner_converged;
      if (!result.converged) break;
    }
    finish(nlp, z, result);
    return result;
  }

  // Conventional SQP iterated to convergence; used for the offline terminal
  // trajectory problems and as a reference solver in benchmarks.
  SolveResult full_solve(const NlpProblem& nlp, const Iterate& z0) {
    SolveResult result;
    Iterate z = z0;
    for (int outer = 0; outer < settings_.full_i_max; ++outer) {
      const auto t0 = clock_t::now();
      OuterRecord rec;
      rec.qp_status = sqp_step(nlp, z, rec.step_norm);
      rec.inner_iterations = 1;
      rec.inner_converged = rec.qp_status == QpStatus::optimal;
      rec.time_ms = ms_since(t0);
      rec.objective = nlp.objective(z.y);
      rec.feasibility = feasibility_certificate(nlp, z.y);
      result.records.push_back(rec);
      ++result.outer_iterations;
      if (!rec.inner_converged) {
        finish(nlp, z, result);
        return result;
      }
      if (rec.step_norm < settings_.eps_tol) {
        result.converged = true;
        break;
      }
    }
    finish(nlp, z, result);
    return result;
  }

  SolveResult dispatch(const NlpProblem& nlp, const Iterate& z0) {
    switch (settings_.mode) {
      case SolverMode::fsqp: return solve(nlp, z0);
      case SolverMode::rti: return rti_solve(nlp, z0);
      case SolverMode::full: return full_solve(nlp, z0);
    }
    return solve(nlp, z0);
  }

  // Active set carried between calls (and between inner iterations).
  void reset_warm_start() { warm_active_.clear(); have_warm_ = false; }

 private:
  using clock_t = std::chrono::steady_clock;

  static double ms_since(clock_t::time_point t0) {
    return std::chrono::duration<double, std::milli>(clock_t::now() - t0)
        .count();
  }

  void finish(const NlpProblem& nlp, const Iterate& z, SolveResult& result) {
    result.z = z;
    result.certificate = feasibility_certificate(nlp, z.y);
    result.feasible = result.certificate <= settings_.feas_tol;
  }

  double damping(double dy_norm) const {
    if (!std::isfinite(settings_.step_max) || dy_norm <= settings_.step_max)
      return 1.0;
    return settings_.step_max / dy_norm;
  }

  QpOptions qp_options() const {
    QpOptions o;
    o.tol = settings_.qp_tol;
    o.max_iter = settings_.qp_max_iter;
    return o;
  }

  // One outer iteration of feasible SQP: frozen derivatives at z.y, inner QP
  // loop on the moving point. Returns true when the inner loop converged; the
  // converged iterate is written to z_out.
  bool inner_loop(const NlpProblem& nlp, const Iterate& z, Iterate& z_out,
                  OuterRecord& rec) {
    const Eigen::VectorXd grad_f = nlp.gradient(z.y);
    const Eigen::MatrixXd A = nlp.jacobian_g(z.y);
    const Eigen::MatrixXd G = nlp.jacobian_h(z.y);
    const Eigen::MatrixXd M = nlp.qp_hessian(z.y, z.lambda, z.mu);
    const Eigen::MatrixXd P = nlp.hessian_P(z.y, z.lambda, z.mu);

    QpSolver qp(qp_options());
    qp.set_matrices(M, A, G, nlp.stage_structure());

    Iterate zh = z;  // the moving inner point
    double prev_step = std::numeric_limits<double>::infinity();
    int growth_streak = 0;
    for (int j = 0; j < settings_.inner_max; ++j) {
      const Eigen::VectorXd a = grad_f + P * (zh.y - z.y);
      const Eigen::VectorXd b = nlp.eval_g(zh.y);
      const Eigen::VectorXd d = nlp.eval_h(zh.y);
      const QpSolution sol =
          qp.solve(a, b, d, have_warm_ ? &warm_active_ : nullptr);
      rec.qp_status = sol.status;
      ++rec.inner_iterations;
      if (sol.status != QpStatus::optimal) return false;
      warm_active_ = sol.active_set;
      have_warm_ = true;

      const double step =
          std::sqrt(sol.dy.squaredNorm() + (sol.lambda - zh.lambda).squaredNorm() +
                    (sol.mu - zh.mu).squaredNorm());
      const double t = damping(sol.dy.norm());
      zh.y += t * sol.dy;
      zh.lambda = (1.0 - t) * zh.lambda + t * sol.lambda;
      zh.mu = (1.0 - t) * zh.mu + t * sol.mu;
      rec.step_norm = step;
      if (step < settings_.eps_tol) {
        rec.inner_converged = true;
        z_out = zh;
        return true;
      }
      // Divergence guard: abandon the inner loop when the step norm keeps
      // growing, so the controller can fall back to the previous iterate.
      if (step > prev_step) {
        if (++growth_streak >= 3) return false;
      } else {
        growth_streak = 0;
      }
      prev_step = step;
    }
    return false;
  }

  // One conventional SQP step (derivatives and residuals at z.y); updates z in
  // place when the QP succeeds and reports the primal-dual step norm.
  QpStatus sqp_step(const NlpProblem& nlp, Iterate& z, double& step_norm) {
    const Eigen::MatrixXd A = nlp.jacobian_g(z.y);
    const Eigen::MatrixXd G = nlp.jacobian_h(z.y);
    const Eigen::MatrixXd M = nlp.qp_hessian(z.y, z.lambda, z.mu);
    QpData data{M,
                nlp.gradient(z.y),
                A,
                nlp.eval_g(z.y),
                G,
                nlp.eval_h(z.y),
                nlp.stage_structure()};
    const QpSolution sol =
        solve_qp(data, have_warm_ ? &warm_active_ : nullptr, qp_options());
    if (sol.status != QpStatus::optimal) return sol.status;
    warm_active_ = sol.active_set;
    have_warm_ = true;
    step_norm =
        std::sqrt(sol.dy.squaredNorm() + (sol.lambda - z.lambda).squaredNorm() +
                  (sol.mu - z.mu).squaredNorm());
    double t = damping(sol.dy.norm());
    if (settings_.line_search) t = merit_backtrack(nlp, z.y, sol, data.c, t);
    z.y += t * sol.dy;
    z.lambda = (1.0 - t) * z.lambda + t * sol.lambda;
    z.mu = (1.0 - t) * z.mu + t * sol.mu;
    return sol.status;
  }

  static double infeasibility_l1(const NlpProblem& nlp,
                                 const Eigen::VectorXd& y) {
    const Eigen::VectorXd g = nlp.eval_g(y);
    const Eigen::VectorXd h = nlp.eval_h(y);
    return g.lpNorm<1>() + h.cwiseMax(0.0).sum();
  }

  // Backtracking Armijo search on the exact l1 penalty function
  // f + sigma (|g|_1 + |h_+|_1); the penalty weight tracks the QP multipliers
  // so the merit function stays exact for the current dual estimate.
  double merit_backtrack(const NlpProblem& nlp, const Eigen::VectorXd& y,
                         const QpSolution& sol, const Eigen::VectorXd& grad_f,
                         double t0) {
    const double mult_scale =
        std::max(sol.lambda.size() ? sol.lambda.lpNorm<Eigen::Infinity>() : 0.0,
                 sol.mu.size() ? sol.mu.lpNorm<Eigen::Infinity>() : 0.0);
    merit_sigma_ = std::max(merit_sigma_, 1.1 * mult_scale + 1.0);

    if (sol.dy.norm() < 1e-8) return t0;  // below merit-function resolution

    const double infeas0 = infeasibility_l1(nlp, y);
    const double merit0 = nlp.objective(y) + merit_sigma_ * infeas0;
    // Upper bound on the merit directional derivative for the QP step.
    const double descent = grad_f.dot(sol.dy) - merit_sigma_ * infeas0;
    const double c1 = 1e-4;
    const double noise = 1e-12 * (1.0 + std::abs(merit0));
    double t = t0;
    for (int k = 0; k < 30; ++k) {
      const Eigen::VectorXd y_try = y + t * sol.dy;
      const double merit =
          nlp.objective(y_try) + merit_sigma_ * infeasibility_l1(nlp, y_try);
      if (merit <= merit0 + c1 * t * descent + noise) return t;
      t *= 0.5;
    }
    return t;
  }

  SolverSettings settings_;
  std::vector<int> warm_active_;
  bool have_warm_ = false;
  double merit_sigma_ = 1.0;
};

}  // namespace racer
