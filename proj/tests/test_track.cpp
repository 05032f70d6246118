#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <racer/track.hpp>

#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

using namespace racer;

namespace {

Centerline circle_track(double radius, double spacing, double width) {
  Centerline c;
  c.width = width;
  const int n = static_cast<int>(std::ceil(2.0 * std::numbers::pi * radius / spacing));
  for (int i = 0; i <= n; ++i) {
    const double a = 2.0 * std::numbers::pi * i / n;
    c.waypoints.emplace_back(radius * std::cos(a), radius * std::sin(a));
  }
  c.waypoints.back() = c.waypoints.front();
  return c;
}

}  // namespace

TEST_CASE("open centerline is rejected") {
  Centerline c = circle_track(1.0, 0.05, 0.46);
  c.waypoints.back() += Eigen::Vector2d(0.01, 0.0);
  CHECK_THROWS(TrackSpline::fit(c));
}

TEST_CASE("circle spline matches the analytic circle") {
  const double R = 1.0;
  auto spline = TrackSpline::fit(circle_track(R, 0.01, 0.46));
  CHECK(spline.length() == doctest::Approx(2.0 * std::numbers::pi * R).epsilon(1e-4));
  CHECK(spline.knot_spacing() <= 0.03);

  std::mt19937 rng(17);
  std::uniform_real_distribution<double> u(-10.0, 10.0);
  double max_pos_err = 0.0, max_tan_err = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const double theta = u(rng);
    const Eigen::Vector2d p = spline.position(theta);
    max_pos_err = std::max(max_pos_err, std::abs(p.norm() - R));
    max_tan_err = std::max(max_tan_err, std::abs(spline.tangent(theta).norm() - 1.0));
  }
  CHECK(max_pos_err <= 1e-4);
  CHECK(max_tan_err <= 1e-3);
}

TEST_CASE("evaluation is periodic across the seam") {
  auto spline = TrackSpline::fit(circle_track(0.8, 0.01, 0.46));
  const double L = spline.length();
  for (double theta : {0.0, 0.3, L / 2, L - 1e-3}) {
    const Eigen::Vector2d a = spline.position(theta);
    const Eigen::Vector2d b = spline.position(theta + L);
    CHECK((a - b).norm() <= 1e-12);
    const Eigen::Vector2d ta = spline.tangent(theta);
    const Eigen::Vector2d tb = spline.tangent(theta - L);
    CHECK((ta - tb).norm() <= 1e-12);
  }
  // C2 across the seam: second derivatives agree just before/after theta=0.
  double px1, py1, dx1, dy1, ax1, ay1, px2, py2, dx2, dy2, ax2, ay2;
  spline.eval2(1e-9, px1, py1, dx1, dy1, ax1, ay1);
  spline.eval2(L - 1e-9, px2, py2, dx2, dy2, ax2, ay2);
  CHECK(std::abs(ax1 - ax2) <= 1e-5);
  CHECK(std::abs(ay1 - ay2) <= 1e-5);
}

TEST_CASE("tangent norm stays near one on a rounded rectangle") {
  // Rounded rectangle assembled from straights and quarter circles.
  Centerline c;
  c.width = 0.46;
  const double a = 1.0, b = 0.4, r = 0.35;
  auto arc = [&](double cx, double cy, double a0, double a1) {
    for (int i = 0; i < 30; ++i) {
      const double t = a0 + (a1 - a0) * i / 30.0;
      c.waypoints.emplace_back(cx + r * std::cos(t), cy + r * std::sin(t));
    }
  };
  for (int i = 0; i < 50; ++i) c.waypoints.emplace_back(-a / 2 + a * i / 50.0, -b / 2 - r);
  arc(a / 2, -b / 2, -std::numbers::pi / 2, 0.0);
  for (int i = 0; i < 20; ++i) c.waypoints.emplace_back(a / 2 + r, -b / 2 + b * i / 20.0);
  arc(a / 2, b / 2, 0.0, std::numbers::pi / 2);
  for (int i = 0; i < 50; ++i) c.waypoints.emplace_back(a / 2 - a * i / 50.0, b / 2 + r);
  arc(-a / 2, b / 2, std::numbers::pi / 2, std::numbers::pi);
  for (int i = 0; i < 20; ++i) c.waypoints.emplace_back(-a / 2 - r, b / 2 - b * i / 20.0);
  arc(-a / 2, -b / 2, std::numbers::pi, 1.5 * std::numbers::pi);
  c.waypoints.push_back(c.waypoints.front());

  auto spline = TrackSpline::fit(c);
  for (int i = 0; i < 500; ++i) {
    const double theta = spline.length() * i / 500.0;
    const double nrm = spline.tangent(theta).norm();
    CHECK(nrm >= 0.9);
    CHECK(nrm <= 1.1);
  }
}

TEST_CASE("track constraint sign and values") {
  const double D = 0.46;
  auto spline = TrackSpline::fit(circle_track(1.0, 0.01, D));
  // On the centerline: -(D/2)^2.
  const Eigen::Vector2d p0 = spline.position(0.7);
  CHECK(track_constraint(p0.x(), p0.y(), 0.7, spline, D) ==
        doctest::Approx(-0.23 * 0.23).epsilon(1e-9));
  // At radial distance D/2: zero.
  const Eigen::Vector2d t0 = spline.tangent(0.7);
  const Eigen::Vector2d nrm(-t0.y(), t0.x());
  const Eigen::Vector2d edge = p0 + 0.23 * nrm.normalized();
  CHECK(std::abs(track_constraint(edge.x(), edge.y(), 0.7, spline, D)) <= 1e-6);
  // 0.24 m off-center: 0.24^2 - 0.23^2 = 0.0047.
  const Eigen::Vector2d out = p0 + 0.24 * nrm.normalized();
  CHECK(track_constraint(out.x(), out.y(), 0.7, spline, D) ==
        doctest::Approx(0.0047).epsilon(1e-6));
}

TEST_CASE("track constraint gradient and hessian match finite differences") {
  const double D = 0.46;
  auto spline = TrackSpline::fit(circle_track(1.0, 0.01, D));
  std::mt19937 rng(23);
  std::uniform_real_distribution<double> u(-0.2, 0.2);
  const double h = 1e-6;
  for (int trial = 0; trial < 20; ++trial) {
    const double theta = 6.0 * u(rng);
    const Eigen::Vector2d p = spline.position(theta) + Eigen::Vector2d(u(rng), u(rng));
    Eigen::Vector3d w(p.x(), p.y(), theta);
    auto eval = [&](const Eigen::Vector3d& q) {
      return track_constraint(q[0], q[1], q[2], spline, D);
    };
    const Eigen::Vector3d grad = track_constraint_gradient(w[0], w[1], w[2], spline);
    const Eigen::Matrix3d hess = track_constraint_hessian(w[0], w[1], w[2], spline);
    for (int j = 0; j < 3; ++j) {
      Eigen::Vector3d wp = w, wm = w;
      wp[j] += h;
      wm[j] -= h;
      CHECK(std::abs((eval(wp) - eval(wm)) / (2 * h) - grad[j]) <= 1e-5 * (1.0 + std::abs(grad[j])));
      const Eigen::Vector3d gp = track_constraint_gradient(wp[0], wp[1], wp[2], spline);
      const Eigen::Vector3d gm = track_constraint_gradient(wm[0], wm[1], wm[2], spline);
      CHECK(((gp - gm) / (2 * h) - hess.col(j)).norm() <= 1e-4 * (1.0 + hess.col(j).norm()));
    }
  }
}

TEST_CASE("contouring and lag errors on a straight reference") {
  // Straight synthetic segment p(theta) = (theta, 0) built as a long thin
  // loop; use the bottom straight where the tangent is (1, 0).
  Centerline c;
  c.width = 0.46;
  const double len = 4.0, r = 0.5;
  auto arc = [&](double cx, double cy, double a0, double a1) {
    for (int i = 0; i < 60; ++i) {
      const double t = a0 + (a1 - a0) * i / 60.0;
      c.waypoints.emplace_back(cx + r * std::cos(t), cy + r * std::sin(t));
    }
  };
  for (int i = 0; i < 200; ++i) c.waypoints.emplace_back(len * i / 200.0, 0.0);
  arc(len, r, -std::numbers::pi / 2, std::numbers::pi / 2);
  for (int i = 0; i < 200; ++i) c.waypoints.emplace_back(len - len * i / 200.0, 2 * r);
  arc(0.0, r, std::numbers::pi / 2, 1.5 * std::numbers::pi);
  c.waypoints.push_back(c.waypoints.front());
  auto spline = TrackSpline::fit(c);

  const double theta_hat = 2.0;  // middle of the bottom straight
  const Eigen::Vector2d ref = spline.position(theta_hat);
  const Eigen::Vector2d tan = spline.tangent(theta_hat);
  CHECK((tan - Eigen::Vector2d(1, 0)).norm() <= 2e-3);

  const double a = 0.13, b = 0.07;
  double eC, eL;
  contouring_lag_errors(ref.x() + a, ref.y() + b, theta_hat, theta_hat, spline, eC, eL);
  CHECK(eC == doctest::Approx(-b).epsilon(2e-3));
  CHECK(eL == doctest::Approx(a).epsilon(2e-3));

  // Zero deviation on the centerline with theta = theta_hat.
  contouring_lag_errors(ref.x(), ref.y(), theta_hat, theta_hat, spline, eC, eL);
  CHECK(std::abs(eC) <= 1e-12);
  CHECK(std::abs(eL) <= 1e-12);
}

TEST_CASE("contouring and lag errors are affine in (p_x, p_y, theta)") {
  auto spline = TrackSpline::fit(circle_track(1.0, 0.01, 0.46));
  const double theta_hat = 1.234;
  Eigen::Vector3d gC, gL;
  contouring_lag_gradients(theta_hat, spline, gC, gL);

  std::mt19937 rng(31);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (int trial = 0; trial < 50; ++trial) {
    Eigen::Vector3d w(u(rng), 1.0 + u(rng), theta_hat + u(rng));
    Eigen::Vector3d step(u(rng), u(rng), u(rng));
    double eC0, eL0, eC1, eL1;
    contouring_lag_errors(w[0], w[1], w[2], theta_hat, spline, eC0, eL0);
    contouring_lag_errors(w[0] + step[0], w[1] + step[1], w[2] + step[2], theta_hat,
                          spline, eC1, eL1);
    // Affine: the increment equals the constant gradient dotted with the step.
    CHECK(eC1 - eC0 == doctest::Approx(gC.dot(step)).epsilon(1e-10));
    CHECK(eL1 - eL0 == doctest::Approx(gL.dot(step)).epsilon(1e-10));
  }
}

TEST_CASE("centerline file round trip") {
  Centerline c = circle_track(1.0, 0.05, 0.46);
  const std::string path = "test_track_roundtrip.json";
  c.save(path);
  Centerline loaded = Centerline::load(path);
  CHECK(loaded.width == doctest::Approx(c.width));
  CHECK(loaded.waypoints.size() == c.waypoints.size());
  CHECK((loaded.waypoints[3] - c.waypoints[3]).norm() <= 1e-12);
  std::remove(path.c_str());
}
