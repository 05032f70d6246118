#pragma once

// The contouring optimal control problem as an NlpProblem.
//
// Decision vector layout:  y = (x_0 .. x_N, u_0 .. u_{N-1}, xi_0 .. xi_{N-1})
// Equalities:              x_0 - x0_hat, then x_{i+1} - psi(x_i, u_i).
// Inequalities, stage i:   tau/delta bounds on x_i, rate bounds on u_i,
//                          optional dtheta bounds, pi(x_i) - xi_i <= 0,
//                          -xi_i <= 0; one terminal ball constraint on x_N.
//
// The contouring and lag errors are linearized around per-stage reference
// arclengths theta_hat, which are fixed when the problem is built; the cost is
// then an exact quadratic in y.

#include <racer/config.hpp>
#include <racer/nlp.hpp>
#include <racer/track.hpp>
#include <racer/vehicle_model.hpp>

#include <Eigen/Dense>

#include <cmath>
#include <memory>
#include <stdexcept>
#include <vector>

namespace racer {

// Smallest-magnitude representative of x modulo period.
inline double wrap_difference(double x, double period) {
  double r = std::remainder(x, period);
  return r;
}

class RacingNlp : public NlpProblem {
 public:
  RacingNlp(std::shared_ptr<const TrackSpline> spline, VehicleParams params,
            OcpConfig cfg, const StateVec& x0,
            const Eigen::VectorXd& theta_hat, const StateVec& x_terminal)
      : spline_(std::move(spline)),
        params_(params),
        cfg_(cfg),
        x0_(x0),
        theta_hat_(theta_hat),
        x_terminal_(x_terminal) {
    cfg_.validate();
    params_.validate();
    if (!spline_) throw std::invalid_argument("RacingNlp: null spline");
    if (theta_hat_.size() != cfg_.N)
      throw std::invalid_argument("RacingNlp: theta_hat must have N entries");
    s_.nx = kNx;
    s_.nu = kNu;
    s_.N = cfg_.N;
    s_.n_slack = cfg_.N;
    rows_per_stage_ = cfg_.bound_dtheta ? 12 : 10;
  }

  const StageStructure& layout() const { return s_; }
  const OcpConfig& config() const { return cfg_; }
  const VehicleParams& params() const { return params_; }
  const TrackSpline& spline() const { return *spline_; }
  const StateVec& initial_state() const { return x0_; }
  const Eigen::VectorXd& theta_hat() const { return theta_hat_; }
  const StateVec& terminal_target() const { return x_terminal_; }
  int rows_per_stage() const { return rows_per_stage_; }

  int n() const override { return s_.n(); }
  int n_eq() const override { return s_.n_eq(); }
  int n_ineq() const override { return rows_per_stage_ * cfg_.N + 1; }

  std::optional<StageStructure> stage_structure() const override { return s_; }

  // --- accessors into a decision vector -------------------------------------

  StateVec state(const Eigen::VectorXd& y, int i) const {
    return y.segment<kNx>(s_.x_off(i));
  }
  InputVec input(const Eigen::VectorXd& y, int i) const {
    return y.segment<kNu>(s_.u_off(i));
  }
  double slack(const Eigen::VectorXd& y, int i) const {
    return y[s_.s_off(i)];
  }

  // --- objective -------------------------------------------------------------

  double objective(const Eigen::VectorXd& y) const override {
    double f = 0.0;
    for (int i = 0; i < cfg_.N; ++i) {
      const StateVec x = state(y, i);
      const InputVec u = input(y, i);
      double eC, eL;
      contouring_lag_errors(x[kPx], x[kPy], x[kTheta], theta_hat_[i], *spline_,
                            eC, eL);
      const double dth = u[kDtheta] - cfg_.v_bar;
      f += sq(cfg_.q_C * eC) + sq(cfg_.q_L * eL) + sq(cfg_.q_dtau * u[kDtau]) +
           sq(cfg_.q_ddelta * u[kDdelta]) + sq(cfg_.q_dtheta * dth);
      f += cfg_.mu_slack * slack(y, i);
    }
    return f;
  }

  Eigen::VectorXd gradient(const Eigen::VectorXd& y) const override {
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(n());
    for (int i = 0; i < cfg_.N; ++i) {
      const StateVec x = state(y, i);
      const InputVec u = input(y, i);
      double eC, eL;
      contouring_lag_errors(x[kPx], x[kPy], x[kTheta], theta_hat_[i], *spline_,
                            eC, eL);
      Eigen::Vector3d gC, gL;
      contouring_lag_gradients(theta_hat_[i], *spline_, gC, gL);
      const Eigen::Vector3d gpos =
          2.0 * sq(cfg_.q_C) * eC * gC + 2.0 * sq(cfg_.q_L) * eL * gL;
      grad[s_.x_off(i) + kPx] += gpos[0];
      grad[s_.x_off(i) + kPy] += gpos[1];
      grad[s_.x_off(i) + kTheta] += gpos[2];
      grad[s_.u_off(i) + kDtau] += 2.0 * sq(cfg_.q_dtau) * u[kDtau];
      grad[s_.u_off(i) + kDdelta] += 2.0 * sq(cfg_.q_ddelta) * u[kDdelta];
      grad[s_.u_off(i) + kDtheta] +=
          2.0 * sq(cfg_.q_dtheta) * (u[kDtheta] - cfg_.v_bar);
      grad[s_.s_off(i)] += cfg_.mu_slack;
    }
    return grad;
  }

  // --- constraints -----------------------------------------------------------

  Eigen::VectorXd eval_g(const Eigen::VectorXd& y) const override {
    Eigen::VectorXd g(n_eq());
    g.segment<kNx>(0) = state(y, 0) - x0_;
    for (int i = 0; i < cfg_.N; ++i)
      g.segment<kNx>(kNx * (i + 1)) =
          state(y, i + 1) - discrete_step(state(y, i), input(y, i),
                                          Disturbance::Zero(), params_,
                                          cfg_.dt);
    return g;
  }

  Eigen::MatrixXd jacobian_g(const Eigen::VectorXd& y) const override {
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n_eq(), n());
    J.block<kNx, kNx>(0, s_.x_off(0)).setIdentity();
    for (int i = 0; i < cfg_.N; ++i) {
      StateJac Ad;
      InputJac Bd;
      discrete_step_jacobians(state(y, i), input(y, i), params_, cfg_.dt, Ad,
                              Bd);
      const int r = kNx * (i + 1);
      J.block<kNx, kNx>(r, s_.x_off(i + 1)).setIdentity();
      J.block<kNx, kNx>(r, s_.x_off(i)) = -Ad;
      J.block<kNx, kNu>(r, s_.u_off(i)) = -Bd;
    }
    return J;
  }

  Eigen::VectorXd eval_h(const Eigen::VectorXd& y) const override {
    Eigen::VectorXd h(n_ineq());
    for (int i = 0; i < cfg_.N; ++i) {
      const StateVec x = state(y, i);
      const InputVec u = input(y, i);
      int r = rows_per_stage_ * i;
      h[r++] = x[kTau] - cfg_.tau_max;
      h[r++] = cfg_.tau_min - x[kTau];
      h[r++] = x[kDelta] - cfg_.delta_max;
      h[r++] = cfg_.delta_min - x[kDelta];
      h[r++] = u[kDtau] - cfg_.dtau_max;
      h[r++] = cfg_.dtau_min - u[kDtau];
      h[r++] = u[kDdelta] - cfg_.ddelta_max;
      h[r++] = cfg_.ddelta_min - u[kDdelta];
      if (cfg_.bound_dtheta) {
        h[r++] = u[kDtheta] - cfg_.dtheta_max;
        h[r++] = cfg_.dtheta_min - u[kDtheta];
      }
      h[r++] = track_constraint(x, *spline_, spline_->width()) - slack(y, i);
      h[r++] = -slack(y, i);
    }
    h[n_ineq() - 1] = terminal_constraint(state(y, cfg_.N));
    return h;
  }

  Eigen::MatrixXd jacobian_h(const Eigen::VectorXd& y) const override {
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n_ineq(), n());
    for (int i = 0; i < cfg_.N; ++i) {
      const StateVec x = state(y, i);
      int r = rows_per_stage_ * i;
      J(r++, s_.x_off(i) + kTau) = 1.0;
      J(r++, s_.x_off(i) + kTau) = -1.0;
      J(r++, s_.x_off(i) + kDelta) = 1.0;
      J(r++, s_.x_off(i) + kDelta) = -1.0;
      J(r++, s_.u_off(i) + kDtau) = 1.0;
      J(r++, s_.u_off(i) + kDtau) = -1.0;
      J(r++, s_.u_off(i) + kDdelta) = 1.0;
      J(r++, s_.u_off(i) + kDdelta) = -1.0;
      if (cfg_.bound_dtheta) {
        J(r++, s_.u_off(i) + kDtheta) = 1.0;
        J(r++, s_.u_off(i) + kDtheta) = -1.0;
      }
      const Eigen::Vector3d gp =
          track_constraint_gradient(x[kPx], x[kPy], x[kTheta], *spline_);
      J(r, s_.x_off(i) + kPx) = gp[0];
      J(r, s_.x_off(i) + kPy) = gp[1];
      J(r, s_.x_off(i) + kTheta) = gp[2];
      J(r++, s_.s_off(i)) = -1.0;
      J(r++, s_.s_off(i)) = -1.0;
    }
    const StateVec xN = state(y, cfg_.N);
    const StateVec diff = terminal_difference(xN);
    for (int j = 0; j < kNx; ++j)
      J(n_ineq() - 1, s_.x_off(cfg_.N) + j) =
          2.0 * cfg_.terminal_weights[j] * diff[j];
    return J;
  }

  // --- Hessian models ----------------------------------------------------------

  // Gauss-Newton model: exact cost curvature plus convex surrogate curvature
  // for the linear slack penalty, mildly regularized on the state blocks.
  Eigen::MatrixXd hessian_M(const Eigen::VectorXd& y) const override {
    Eigen::MatrixXd H = cost_hessian();
    // State ridge: a tiny floor for strict convexity, plus a sharply
    // speed-dependent term. The regularized tire model makes the discretized
    // dynamics extremely stiff near standstill, so the linearization there is
    // only trustworthy for tiny state moves; the ridge makes the QP route
    // corrections through faster stages instead.
    for (int i = 0; i <= cfg_.N; ++i) {
      const double v_reg = std::max(state(y, i)[kVf], params_.epsilon_v);
      const double stiff = 1.0 / (v_reg * v_reg);
      // Capped so the QP stays well conditioned under staged elimination.
      const double ridge =
          1e-10 + low_speed_ridge_ * std::min(stiff * stiff, 1e8);
      for (int j = 0; j < kNx; ++j) H(s_.x_off(i) + j, s_.x_off(i) + j) += ridge;
    }
    for (int i = 0; i < cfg_.N; ++i)
      H(s_.s_off(i), s_.s_off(i)) += cfg_.slack_hessian;
    return H;
  }

  Eigen::MatrixXd hessian_P(const Eigen::VectorXd& y,
                            const Eigen::VectorXd& lambda,
                            const Eigen::VectorXd& mu) const override {
    if (hessian_mode_ == HessianMode::gauss_newton) {
      // The cost is an exact quadratic, so its true Hessian is constant.
      return cost_hessian();
    }
    return exact_lagrangian_hessian(y, lambda, mu);
  }

  // QP model Hessian: the convex cost Hessian plus multiplier-weighted
  // constraint curvature, with each disjoint stage block clamped to stay
  // positive definite. The curvature term is what keeps QP steps honest at
  // the stiff low-speed stages — without it the quadratic model charges
  // nothing for moves along directions where the linearized dynamics
  // overpromise by orders of magnitude.
  Eigen::MatrixXd qp_hessian(const Eigen::VectorXd& y,
                             const Eigen::VectorXd& lambda,
                             const Eigen::VectorXd& mu) const override {
    Eigen::MatrixXd H = hessian_M(y);
    if (lambda.size() != n_eq() || mu.size() != n_ineq()) return H;
    if (lambda.lpNorm<Eigen::Infinity>() == 0.0 &&
        mu.lpNorm<Eigen::Infinity>() == 0.0)
      return H;
    add_lagrangian_curvature(H, y, lambda, mu);
    Eigen::Matrix<double, kNx + kNu, kNx + kNu> B;
    for (int i = 0; i < cfg_.N; ++i) {
      auto idx = [&](int a) {
        return a < kNx ? s_.x_off(i) + a : s_.u_off(i) + (a - kNx);
      };
      for (int a = 0; a < kNx + kNu; ++a)
        for (int b = 0; b < kNx + kNu; ++b) B(a, b) = H(idx(a), idx(b));
      Eigen::SelfAdjointEigenSolver<decltype(B)> es(B);
      const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(1e-8);
      B = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
      for (int a = 0; a < kNx + kNu; ++a)
        for (int b = 0; b < kNx + kNu; ++b) H(idx(a), idx(b)) = B(a, b);
    }
    return H;
  }

  void set_hessian_mode(HessianMode m) { hessian_mode_ = m; }

  // --- terminal constraint helpers --------------------------------------------

  double terminal_constraint(const StateVec& xN) const {
    const StateVec diff = terminal_difference(xN);
    double v = -sq(cfg_.r_f);
    for (int j = 0; j < kNx; ++j) v += cfg_.terminal_weights[j] * sq(diff[j]);
    return v;
  }

  StateVec terminal_difference(const StateVec& xN) const {
    StateVec d = xN - x_terminal_;
    d[kGamma] = wrap_difference(d[kGamma], 2.0 * M_PI);
    d[kTheta] = wrap_difference(d[kTheta], spline_->length());
    return d;
  }

 private:
  static double sq(double v) { return v * v; }

  // Hessian of the (exactly quadratic) cost; slack entries are zero because
  // the penalty is linear.
  Eigen::MatrixXd cost_hessian() const {
    Eigen::MatrixXd H = Eigen::MatrixXd::Zero(n(), n());
    for (int i = 0; i < cfg_.N; ++i) {
      Eigen::Vector3d gC, gL;
      contouring_lag_gradients(theta_hat_[i], *spline_, gC, gL);
      const Eigen::Matrix3d Hp = 2.0 * sq(cfg_.q_C) * gC * gC.transpose() +
                                 2.0 * sq(cfg_.q_L) * gL * gL.transpose();
      const int idx[3] = {s_.x_off(i) + kPx, s_.x_off(i) + kPy,
                          s_.x_off(i) + kTheta};
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) H(idx[a], idx[b]) += Hp(a, b);
      H(s_.u_off(i) + kDtau, s_.u_off(i) + kDtau) = 2.0 * sq(cfg_.q_dtau);
      H(s_.u_off(i) + kDdelta, s_.u_off(i) + kDdelta) = 2.0 * sq(cfg_.q_ddelta);
      H(s_.u_off(i) + kDtheta, s_.u_off(i) + kDtheta) = 2.0 * sq(cfg_.q_dtheta);
    }
    return H;
  }

  Eigen::MatrixXd exact_lagrangian_hessian(const Eigen::VectorXd& y,
                                           const Eigen::VectorXd& lambda,
                                           const Eigen::VectorXd& mu) const {
    Eigen::MatrixXd H = cost_hessian();
    add_lagrangian_curvature(H, y, lambda, mu);
    return H;
  }

  void add_lagrangian_curvature(Eigen::MatrixXd& H, const Eigen::VectorXd& y,
                                const Eigen::VectorXd& lambda,
                                const Eigen::VectorXd& mu) const {
    const double fd = 1e-6;
    for (int i = 0; i < cfg_.N; ++i) {
      // Curvature of -lambda_{i+1}^T psi(x_i, u_i) via central differences of
      // the analytic step Jacobians.
      const Eigen::VectorXd lam = lambda.segment<kNx>(kNx * (i + 1));
      Eigen::Matrix<double, kNx + kNu, kNx + kNu> W;
      StateVec x = state(y, i);
      InputVec u = input(y, i);
      auto row_of = [&](const StateVec& xs, const InputVec& us) {
        StateJac Ad;
        InputJac Bd;
        discrete_step_jacobians(xs, us, params_, cfg_.dt, Ad, Bd);
        Eigen::Matrix<double, 1, kNx + kNu> r;
        r.leftCols<kNx>() = lam.transpose() * Ad;
        r.rightCols<kNu>() = lam.transpose() * Bd;
        return r;
      };
      for (int j = 0; j < kNx + kNu; ++j) {
        StateVec xp = x, xm = x;
        InputVec up = u, um = u;
        if (j < kNx) {
          xp[j] += fd;
          xm[j] -= fd;
        } else {
          up[j - kNx] += fd;
          um[j - kNx] -= fd;
        }
        W.row(j) = (row_of(xp, up) - row_of(xm, um)) / (2.0 * fd);
      }
      W = 0.5 * (W + W.transpose()).eval();
      for (int a = 0; a < kNx + kNu; ++a)
        for (int b = 0; b < kNx + kNu; ++b) {
          const int ia = a < kNx ? s_.x_off(i) + a : s_.u_off(i) + (a - kNx);
          const int ib = b < kNx ? s_.x_off(i) + b : s_.u_off(i) + (b - kNx);
          H(ia, ib) -= W(a, b);
        }

      // Softened track constraint curvature at this stage.
      const int track_row = rows_per_stage_ * i + rows_per_stage_ - 2;
      const double m = mu[track_row];
      if (m != 0.0) {
        const StateVec xs = state(y, i);
        const Eigen::Matrix3d Hp =
            track_constraint_hessian(xs[kPx], xs[kPy], xs[kTheta], *spline_);
        const int idx[3] = {s_.x_off(i) + kPx, s_.x_off(i) + kPy,
                            s_.x_off(i) + kTheta};
        for (int a = 0; a < 3; ++a)
          for (int b = 0; b < 3; ++b) H(idx[a], idx[b]) += m * Hp(a, b);
      }
    }
    const double m_term = mu[n_ineq() - 1];
    if (m_term != 0.0)
      for (int j = 0; j < kNx; ++j)
        H(s_.x_off(cfg_.N) + j, s_.x_off(cfg_.N) + j) +=
            m_term * 2.0 * cfg_.terminal_weights[j];
  }

  std::shared_ptr<const TrackSpline> spline_;
  VehicleParams params_;
  OcpConfig cfg_;
  StateVec x0_;
  Eigen::VectorXd theta_hat_;
  StateVec x_terminal_;
  StageStructure s_;
  int rows_per_stage_ = 12;
  double low_speed_ridge_ = 1e-2;
  HessianMode hessian_mode_ = HessianMode::gauss_newton;
};

// Decision vector built by simulating the nominal model forward from x0 under
// the given input sequence, with zero slacks; yields zero dynamics residual.
inline Eigen::VectorXd rollout_decision_vector(const RacingNlp& nlp,
                                               const StateVec& x0,
                                               const std::vector<InputVec>& u) {
  const auto& s = nlp.layout();
  if (static_cast<int>(u.size()) != s.N)
    throw std::invalid_argument("rollout: need N inputs");
  Eigen::VectorXd y = Eigen::VectorXd::Zero(s.n());
  StateVec x = x0;
  y.segment<kNx>(s.x_off(0)) = x;
  for (int i = 0; i < s.N; ++i) {
    y.segment<kNu>(s.u_off(i)) = u[i];
    x = discrete_step(x, u[i], Disturbance::Zero(), nlp.params(),
                      nlp.config().dt);
    y.segment<kNx>(s.x_off(i + 1)) = x;
  }
  return y;
}

}  // namespace racer
