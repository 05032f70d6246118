#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <racer/ocp.hpp>

#include <cmath>
#include <memory>
#include <random>

using namespace racer;
using Eigen::VectorXd;

namespace {

std::shared_ptr<const TrackSpline> circle_track(double R = 1.0,
                                                double width = 0.46) {
  Centerline c;
  const int n = 64;
  c.waypoints.resize(n + 1);
  for (int i = 0; i <= n; ++i) {
    const double a = 2.0 * M_PI * i / n;
    c.waypoints[i] = {R * std::cos(a), R * std::sin(a)};
  }
  c.width = width;
  c.orientation = +1;
  return std::make_shared<const TrackSpline>(TrackSpline::fit(c));
}

RacingNlp make_nlp(int N, bool bound_dtheta,
                   std::shared_ptr<const TrackSpline> spline = nullptr) {
  if (!spline) spline = circle_track();
  OcpConfig cfg;
  cfg.N = N;
  cfg.bound_dtheta = bound_dtheta;
  VehicleParams p;
  StateVec x0 = StateVec::Zero();
  x0[kPx] = 1.0;  // on the centerline at arclength 0
  x0[kGamma] = M_PI / 2.0;
  x0[kVf] = 0.5;
  VectorXd theta_hat(N);
  for (int i = 0; i < N; ++i) theta_hat[i] = cfg.v_bar * cfg.dt * i;
  StateVec xf = x0;
  xf[kTheta] = cfg.v_bar * cfg.dt * N;
  const Eigen::Vector2d pos = spline->position(xf[kTheta]);
  xf[kPx] = pos.x();
  xf[kPy] = pos.y();
  return RacingNlp(spline, p, cfg, x0, theta_hat, xf);
}

VectorXd random_point(const RacingNlp& nlp, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  const auto& s = nlp.layout();
  VectorXd y(nlp.n());
  for (int i = 0; i <= s.N; ++i) {
    StateVec x = nlp.initial_state();
    const double th = nlp.config().v_bar * nlp.config().dt * i;
    const Eigen::Vector2d pos = nlp.spline().position(th);
    x[kPx] = pos.x() + 0.3 * u(rng);
    x[kPy] = pos.y() + 0.3 * u(rng);
    x[kGamma] += u(rng);
    x[kVf] = 0.5 + u(rng);
    x[kVl] = 0.3 * u(rng);
    x[kOmega] = u(rng);
    x[kTau] = u(rng);
    x[kDelta] = 0.5 * u(rng);
    x[kTheta] = th + 0.1 * u(rng);
    y.segment<kNx>(s.x_off(i)) = x;
  }
  for (int i = 0; i < s.N; ++i) {
    y[s.u_off(i) + kDtau] = u(rng);
    y[s.u_off(i) + kDdelta] = u(rng);
    y[s.u_off(i) + kDtheta] = 1.0 + u(rng);
    y[s.s_off(i)] = 0.02 + 0.01 * u(rng);
  }
  return y;
}

}  // namespace

TEST_CASE("dimension counting for the documented layout") {
  auto nlp = make_nlp(30, /*bound_dtheta=*/false);
  CHECK(nlp.n() == 399);      // 9*31 + 3*30 + 30
  CHECK(nlp.n_eq() == 279);   // 9*31
  CHECK(nlp.n_ineq() == 301); // 10*30 + 1
  REQUIRE(nlp.stage_structure().has_value());
  CHECK(nlp.stage_structure()->n() == 399);

  auto nlp2 = make_nlp(30, /*bound_dtheta=*/true);
  CHECK(nlp2.n_ineq() == 361); // 12*30 + 1
}

TEST_CASE("cost vanishes on a centerline reference at target progress rate") {
  auto nlp = make_nlp(8, true);
  const auto& s = nlp.layout();
  VectorXd y = VectorXd::Zero(nlp.n());
  for (int i = 0; i <= s.N; ++i) {
    const double th =
        i < s.N ? nlp.theta_hat()[i]
                : nlp.theta_hat()[s.N - 1] + nlp.config().v_bar * nlp.config().dt;
    const Eigen::Vector2d pos = nlp.spline().position(th);
    y[s.x_off(i) + kPx] = pos.x();
    y[s.x_off(i) + kPy] = pos.y();
    y[s.x_off(i) + kTheta] = th;
  }
  for (int i = 0; i < s.N; ++i)
    y[s.u_off(i) + kDtheta] = nlp.config().v_bar;
  CHECK(nlp.objective(y) == doctest::Approx(0.0).epsilon(1e-14));
}

TEST_CASE("slack penalty is linear with slope mu") {
  auto nlp = make_nlp(4, true);
  VectorXd y = random_point(nlp, 3);
  const double f0 = nlp.objective(y);
  y[nlp.layout().s_off(2)] += 0.5;
  CHECK(nlp.objective(y) - f0 ==
        doctest::Approx(0.5 * nlp.config().mu_slack).epsilon(1e-12));
}

TEST_CASE("nominal rollout has zero dynamics residual") {
  auto nlp = make_nlp(6, true);
  std::vector<InputVec> u(6, InputVec(0.2, -0.1, 1.0));
  VectorXd y = rollout_decision_vector(nlp, nlp.initial_state(), u);
  CHECK(nlp.eval_g(y).lpNorm<Eigen::Infinity>() <= 1e-14);
}

TEST_CASE("track entry of h matches a hand-computed off-track state") {
  // 1 cm outside the track circle with D = 0.46: (0.24)^2 - (0.23)^2 = 0.0047.
  auto spline = circle_track(1.0, 0.46);
  auto nlp = make_nlp(4, true, spline);
  const auto& s = nlp.layout();
  VectorXd y = VectorXd::Zero(nlp.n());
  const int i = 1;
  const double th = 0.7;
  const Eigen::Vector2d pos = spline->position(th);
  const Eigen::Vector2d tan = spline->tangent(th).normalized();
  const Eigen::Vector2d normal(-tan.y(), tan.x());
  y[s.x_off(i) + kPx] = pos.x() + 0.24 * normal.x();
  y[s.x_off(i) + kPy] = pos.y() + 0.24 * normal.y();
  y[s.x_off(i) + kTheta] = th;
  const VectorXd h = nlp.eval_h(y);
  const int track_row = nlp.rows_per_stage() * i + nlp.rows_per_stage() - 2;
  CHECK(h[track_row] == doctest::Approx(0.0047).epsilon(1e-9));
}

TEST_CASE("inequality Jacobian: bound rows and slack columns") {
  auto nlp = make_nlp(5, true);
  VectorXd y = random_point(nlp, 7);
  Eigen::MatrixXd J = nlp.jacobian_h(y);
  const auto& s = nlp.layout();
  for (int i = 0; i < s.N; ++i) {
    const int r0 = nlp.rows_per_stage() * i;
    CHECK(J(r0 + 0, s.x_off(i) + kTau) == 1.0);
    CHECK(J(r0 + 1, s.x_off(i) + kTau) == -1.0);
    CHECK(J(r0 + 4, s.u_off(i) + kDtau) == 1.0);
    // Softened track row has slack column -1; nonnegativity row likewise.
    CHECK(J(r0 + nlp.rows_per_stage() - 2, s.s_off(i)) == -1.0);
    CHECK(J(r0 + nlp.rows_per_stage() - 1, s.s_off(i)) == -1.0);
  }
}

TEST_CASE("model Hessian carries the documented input curvature") {
  auto nlp = make_nlp(4, true);
  VectorXd y = random_point(nlp, 11);
  Eigen::MatrixXd M = nlp.hessian_M(y);
  const auto& s = nlp.layout();
  const auto& c = nlp.config();
  for (int i = 0; i < s.N; ++i) {
    CHECK(M(s.u_off(i) + kDtau, s.u_off(i) + kDtau) ==
          doctest::Approx(2.0 * c.q_dtau * c.q_dtau));
    CHECK(M(s.s_off(i), s.s_off(i)) == doctest::Approx(c.slack_hessian));
  }
  // M must be symmetric PSD on the whole space.
  CHECK((M - M.transpose()).lpNorm<Eigen::Infinity>() <= 1e-10);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(M);
  CHECK(es.eigenvalues().minCoeff() >= -1e-12);
}

TEST_CASE("gradient and constraint Jacobians agree with finite differences") {
  auto nlp = make_nlp(3, true);
  VectorXd y = random_point(nlp, 21);
  const double h = 1e-6;

  const VectorXd grad = nlp.gradient(y);
  const Eigen::MatrixXd Jg = nlp.jacobian_g(y);
  const Eigen::MatrixXd Jh = nlp.jacobian_h(y);
  for (int j = 0; j < nlp.n(); ++j) {
    VectorXd yp = y, ym = y;
    yp[j] += h;
    ym[j] -= h;
    const double fd = (nlp.objective(yp) - nlp.objective(ym)) / (2 * h);
    CHECK(grad[j] == doctest::Approx(fd).epsilon(1e-5).scale(1.0 + std::abs(fd)));
    const VectorXd dg = (nlp.eval_g(yp) - nlp.eval_g(ym)) / (2 * h);
    CHECK((Jg.col(j) - dg).lpNorm<Eigen::Infinity>() <=
          1e-5 * (1.0 + dg.lpNorm<Eigen::Infinity>()));
    const VectorXd dh = (nlp.eval_h(yp) - nlp.eval_h(ym)) / (2 * h);
    CHECK((Jh.col(j) - dh).lpNorm<Eigen::Infinity>() <=
          1e-5 * (1.0 + dh.lpNorm<Eigen::Infinity>()));
  }
}

TEST_CASE("exact Lagrangian Hessian matches finite differences of its gradient") {
  auto nlp = make_nlp(2, true);
  nlp.set_hessian_mode(HessianMode::exact);
  VectorXd y = random_point(nlp, 33);
  std::mt19937 rng(5);
  std::normal_distribution<double> g;
  VectorXd lam(nlp.n_eq()), mu(nlp.n_ineq());
  for (int i = 0; i < lam.size(); ++i) lam[i] = 0.3 * g(rng);
  for (int i = 0; i < mu.size(); ++i) mu[i] = std::abs(0.3 * g(rng));

  auto lagrangian_grad = [&](const VectorXd& yy) -> VectorXd {
    return nlp.gradient(yy) + nlp.jacobian_g(yy).transpose() * lam +
           nlp.jacobian_h(yy).transpose() * mu;
  };
  const Eigen::MatrixXd P = nlp.hessian_P(y, lam, mu);
  const double h = 1e-5;
  for (int j = 0; j < nlp.n(); ++j) {
    VectorXd yp = y, ym = y;
    yp[j] += h;
    ym[j] -= h;
    const VectorXd col = (lagrangian_grad(yp) - lagrangian_grad(ym)) / (2 * h);
    CHECK((P.col(j) - col).lpNorm<Eigen::Infinity>() <=
          2e-4 * (1.0 + col.lpNorm<Eigen::Infinity>()));
  }
}

TEST_CASE("quadratic cost identity: grad(y2) = grad(y1) + P (y2 - y1)") {
  // The default model uses the exact (constant) cost Hessian for P, so the
  // perturbed gradient of the inner loop reproduces the true gradient.
  auto nlp = make_nlp(4, true);
  VectorXd y1 = random_point(nlp, 41), y2 = random_point(nlp, 42);
  const Eigen::MatrixXd P =
      nlp.hessian_P(y1, VectorXd::Zero(nlp.n_eq()), VectorXd::Zero(nlp.n_ineq()));
  const VectorXd predicted = nlp.gradient(y1) + P * (y2 - y1);
  CHECK((predicted - nlp.gradient(y2)).lpNorm<Eigen::Infinity>() <= 1e-9);
}

TEST_CASE("feasible points prefer zero slacks") {
  // At any y with pi(x_i) <= 0 for all stages, setting xi = 0 keeps h <= 0 and
  // strictly lowers the cost, so the soft problem reduces to the hard one.
  auto nlp = make_nlp(4, true);
  const auto& s = nlp.layout();
  VectorXd y = VectorXd::Zero(nlp.n());
  for (int i = 0; i <= s.N; ++i) {
    const double th = nlp.theta_hat()[std::min(i, s.N - 1)];
    const Eigen::Vector2d pos = nlp.spline().position(th);
    y[s.x_off(i) + kPx] = pos.x();
    y[s.x_off(i) + kPy] = pos.y();
    y[s.x_off(i) + kTheta] = th;
  }
  for (int i = 0; i < s.N; ++i) y[s.s_off(i)] = 0.05;
  const double f_slacked = nlp.objective(y);
  VectorXd y0 = y;
  for (int i = 0; i < s.N; ++i) y0[s.s_off(i)] = 0.0;
  CHECK(nlp.objective(y0) < f_slacked);
  const VectorXd h = nlp.eval_h(y0);
  for (int i = 0; i < s.N; ++i) {
    const int r = nlp.rows_per_stage() * i + nlp.rows_per_stage() - 2;
    CHECK(h[r] <= 0.0);
    CHECK(h[r + 1] <= 0.0);
  }
}

TEST_CASE("terminal constraint wraps heading and arclength") {
  auto nlp = make_nlp(3, true);
  StateVec xN = nlp.terminal_target();
  CHECK(nlp.terminal_constraint(xN) ==
        doctest::Approx(-nlp.config().r_f * nlp.config().r_f));
  // A full lap of arclength and a full turn of heading are the same point.
  StateVec wrapped = xN;
  wrapped[kGamma] += 2.0 * M_PI;
  wrapped[kTheta] += nlp.spline().length();
  CHECK(nlp.terminal_constraint(wrapped) ==
        doctest::Approx(nlp.terminal_constraint(xN)).epsilon(1e-10));
}
