// Per-step racing controller: candidate shifting, warm-started solver
// invocation, and the open-loop fallback that keeps the loop feasible when a
// solve fails. The candidate adopted at each step is a value object so a
// simulation can hand it between threads across steps.
#pragma once

#include <memory>
#include <stdexcept>
#include <utility>

#include <Eigen/Dense>

#include "racer/fsqp.hpp"
#include "racer/ocp.hpp"
#include "racer/terminal.hpp"

namespace racer {

// A feasible (or best-known) trajectory guess for the OCP at step t, stored
// in the RacingNlp decision layout together with its multipliers. After a
// successful solve `shifts` is 0; each fallback shift increments it.
struct Candidate {
  long t = 0;              // step this candidate is valid for
  Eigen::VectorXd y;       // states, inputs, slacks (RacingNlp layout)
  Eigen::VectorXd lambda;  // equality multipliers
  Eigen::VectorXd mu;      // inequality multipliers
  bool solved = true;      // false once the candidate is a pure shift
  int shifts = 0;          // consecutive shifts since the last solve
};

// Per-step log entry.
struct StepRecord {
  long t = 0;
  SolverMode mode = SolverMode::fsqp;
  bool solver_success = false;
  bool fallback = false;    // the shifted candidate was adopted
  int shifts = 0;           // provenance counter after this step
  double solve_time_ms = 0.0;  // solver call only, excludes NLP build
  int outer_iterations = 0;
  int inner_iterations = 0;
  double objective = 0.0;   // at the adopted point
  double cv = 0.0;          // aggregate constraint violation at adoption
  double certificate = 0.0;
};

class Controller {
 public:
  Controller(std::shared_ptr<const TrackSpline> spline, VehicleParams params,
             OcpConfig cfg, TerminalLookup lookup, SolverSettings settings,
             SolverMode mode, int fallback_cap = 5)
      : spline_(std::move(spline)),
        params_(params),
        cfg_(cfg),
        lookup_(std::move(lookup)),
        settings_(settings),
        mode_(mode),
        fallback_cap_(fallback_cap) {
    cfg_.validate();
    params_.validate();
    if (!spline_) throw std::invalid_argument("Controller: null spline");
    if (lookup_.horizon() != cfg_.N)
      throw std::invalid_argument(
          "Controller: terminal lookup horizon differs from OCP horizon");
    settings_.mode = mode_;
    s_.nx = kNx;
    s_.nu = kNu;
    s_.N = cfg_.N;
    s_.n_slack = cfg_.N;
  }

  const OcpConfig& config() const { return cfg_; }
  const TerminalLookup& lookup() const { return lookup_; }
  SolverMode mode() const { return mode_; }
  int fallback_cap() const { return fallback_cap_; }
  const StageStructure& layout() const { return s_; }

  // Candidate for step 0: the first N steps of the transitional trajectory,
  // feasible from the stationary start by construction.
  Candidate initial_candidate() const {
    const TerminalTrajectory& tr = lookup_.transition();
    const int N = cfg_.N;
    if (tr.T < N)
      throw std::invalid_argument(
          "Controller: transition shorter than the horizon");
    Candidate c;
    c.t = 0;
    c.y = Eigen::VectorXd::Zero(s_.n());
    for (int i = 0; i <= N; ++i) c.y.segment<kNx>(s_.x_off(i)) = tr.x[i];
    for (int i = 0; i < N; ++i) c.y.segment<kNu>(s_.u_off(i)) = tr.u[i];
    c.lambda = Eigen::VectorXd::Zero(s_.n_eq());
    c.mu = Eigen::VectorXd::Zero(n_ineq());
    c.solved = true;
    c.shifts = 0;
    // Dual warm start: one QP at the (feasible, near-optimal) candidate
    // yields multiplier estimates. They let the first control step build a
    // curvature-aware QP model; with zero multipliers the model has no
    // knowledge of the stiff launch-phase dynamics and its steps overshoot.
    const RacingNlp nlp = make_nlp(tr.x[0], 0, c);
    QpData data{nlp.hessian_M(c.y), nlp.gradient(c.y), nlp.jacobian_g(c.y),
                nlp.eval_g(c.y),    nlp.jacobian_h(c.y), nlp.eval_h(c.y),
                nlp.stage_structure()};
    const QpSolution sol = solve_qp(data);
    if (sol.status == QpStatus::optimal) {
      c.lambda = sol.lambda;
      c.mu = sol.mu;
    }
    return c;
  }

  // One-step shift: stages move forward, the new tail comes from the
  // terminal trajectory (state at t+N, input that reaches it from the old
  // terminal state), the new tail slack is zero and all multipliers shift
  // stage-wise with zeros appended.
  Candidate shift(const Candidate& prev) const {
    const int N = cfg_.N;
    const long t = prev.t + 1;
    Candidate c;
    c.t = t;
    c.y = Eigen::VectorXd::Zero(s_.n());
    for (int i = 0; i < N; ++i)
      c.y.segment<kNx>(s_.x_off(i)) = prev.y.segment<kNx>(s_.x_off(i + 1));
    c.y.segment<kNx>(s_.x_off(N)) = lookup_.target(t);
    for (int i = 0; i + 1 < N; ++i)
      c.y.segment<kNu>(s_.u_off(i)) = prev.y.segment<kNu>(s_.u_off(i + 1));
    c.y.segment<kNu>(s_.u_off(N - 1)) = lookup_.target_input(t - 1);
    for (int i = 0; i + 1 < N; ++i) c.y[s_.s_off(i)] = prev.y[s_.s_off(i + 1)];
    c.y[s_.s_off(N - 1)] = 0.0;

    // Equality blocks: [x_0 identity; N dynamics]; each moves one stage up.
    c.lambda = Eigen::VectorXd::Zero(s_.n_eq());
    for (int b = 0; b < N; ++b)
      c.lambda.segment<kNx>(kNx * b) = prev.lambda.segment<kNx>(kNx * (b + 1));
    // Inequalities: per-stage blocks plus one terminal row.
    const int rps = rows_per_stage();
    c.mu = Eigen::VectorXd::Zero(n_ineq());
    for (int i = 0; i + 1 < N; ++i)
      c.mu.segment(rps * i, rps) = prev.mu.segment(rps * (i + 1), rps);

    c.solved = false;
    c.shifts = prev.shifts + 1;
    return c;
  }

  // Builds the OCP at (measured, t) with linearization arclengths taken from
  // the candidate's own states.
  RacingNlp make_nlp(const StateVec& measured, long t,
                     const Candidate& cand) const {
    Eigen::VectorXd theta_hat(cfg_.N);
    for (int i = 0; i < cfg_.N; ++i)
      theta_hat[i] = cand.y[s_.x_off(i) + kTheta];
    return RacingNlp(spline_, params_, cfg_, measured, theta_hat,
                     lookup_.target(t));
  }

  struct StepResult {
    InputVec u = InputVec::Zero();  // applied input
    Candidate candidate;            // adopted for this step
    StepRecord record;
    bool abort = false;  // fallback cap exceeded
  };

  // One controller tick. `previous` is the candidate adopted at step t-1 (or,
  // for the first step, the initial candidate already valid at t).
  // `force_failure` pretends the solver failed, exercising the fallback.
  StepResult control_step(const StateVec& measured, long t,
                          const Candidate& previous,
                          bool force_failure = false) const {
    if (previous.t != t && previous.t + 1 != t)
      throw std::invalid_argument("control_step: candidate from wrong step");
    Candidate cand = previous.t == t ? previous : shift(previous);
    cand.y.segment<kNx>(s_.x_off(0)) = measured;

    StepResult res;
    res.record.t = t;
    res.record.mode = mode_;

    RacingNlp nlp = make_nlp(measured, t, cand);
    if (!force_failure) {
      FsqpSolver solver(settings_);
      Iterate z0;
      z0.y = cand.y;
      z0.lambda = cand.lambda;
      z0.mu = cand.mu;
      const auto t0 = std::chrono::steady_clock::now();
      const SolveResult r = solver.dispatch(nlp, z0);
      res.record.solve_time_ms =
          std::chrono::duration<double, std::milli>(
              std::chrono::steady_clock::now() - t0)
              .count();
      res.record.outer_iterations = r.outer_iterations;
      for (const OuterRecord& rec : r.records)
        res.record.inner_iterations += rec.inner_iterations;
      // RTI deliberately trades feasibility for speed, so it is adopted on a
      // clean QP solve alone; the other modes must certify feasibility.
      const bool success =
          r.converged && (mode_ == SolverMode::rti || r.feasible);
      res.record.solver_success = success;
      if (success) {
        cand.y = r.z.y;
        cand.lambda = r.z.lambda;
        cand.mu = r.z.mu;
        cand.solved = true;
        cand.shifts = 0;
        res.record.certificate = r.certificate;
      }
    }
    if (!cand.solved && cand.shifts > fallback_cap_) {
      res.abort = true;
      res.candidate = cand;
      res.record.fallback = true;
      res.record.shifts = cand.shifts;
      return res;
    }
    res.record.fallback = !cand.solved;
    res.record.shifts = cand.shifts;
    res.record.objective = nlp.objective(cand.y);
    res.record.cv = constraint_violation(nlp, cand.y);
    if (!cand.solved) res.record.certificate = feasibility_certificate(nlp, cand.y);
    res.u = cand.y.segment<kNu>(s_.u_off(0));
    res.candidate = std::move(cand);
    return res;
  }

  int rows_per_stage() const { return cfg_.bound_dtheta ? 12 : 10; }
  int n_ineq() const { return rows_per_stage() * cfg_.N + 1; }

 private:
  std::shared_ptr<const TrackSpline> spline_;
  VehicleParams params_;
  OcpConfig cfg_;
  TerminalLookup lookup_;
  SolverSettings settings_;
  SolverMode mode_;
  int fallback_cap_;
  StageStructure s_;
};

}  // namespace racer
