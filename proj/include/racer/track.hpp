// Arclength-parameterized periodic centerline spline, the track-membership
// constraint pi(x), and linearized contouring/lag errors.
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "racer/vehicle_model.hpp"

namespace racer {

struct Centerline {
  std::vector<Eigen::Vector2d> waypoints;  // closed loop, last == first
  double width = 0.0;                      // D [m]
  int orientation = +1;                    // +1 counterclockwise, -1 clockwise

  void validate() const {
    if (waypoints.size() < 4)
      throw std::invalid_argument("Centerline: need at least 4 waypoints");
    if ((waypoints.front() - waypoints.back()).norm() > 1e-9)
      throw std::invalid_argument("Centerline: loop is not closed");
    if (!(width > 0.0)) throw std::invalid_argument("Centerline: width must be positive");
  }

  static Centerline load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("Centerline: cannot open " + path);
    nlohmann::json j;
    in >> j;
    Centerline c;
    c.width = j.at("width").get<double>();
    if (j.contains("orientation"))
      c.orientation = j.at("orientation").get<std::string>() == "cw" ? -1 : +1;
    for (const auto& wp : j.at("waypoints"))
      c.waypoints.emplace_back(wp.at(0).get<double>(), wp.at(1).get<double>());
    c.validate();
    return c;
  }

  void save(const std::string& path) const {
    nlohmann::json j;
    j["width"] = width;
    j["orientation"] = orientation == -1 ? "cw" : "ccw";
    auto& wps = j["waypoints"] = nlohmann::json::array();
    for (const auto& p : waypoints) wps.push_back({p.x(), p.y()});
    std::ofstream out(path);
    if (!out) throw std::runtime_error("Centerline: cannot write " + path);
    out << j.dump(2) << "\n";
  }
};

namespace detail {

// Periodic cubic spline on a uniform grid: values y_0..y_{K-1} at s_j = j*h,
// period K*h. Returns the second-derivative moments M_0..M_{K-1}.
inline Eigen::VectorXd periodic_spline_moments(const Eigen::VectorXd& y, double h) {
  const int K = static_cast<int>(y.size());
  Eigen::MatrixXd T = Eigen::MatrixXd::Zero(K, K);
  Eigen::VectorXd rhs(K);
  for (int j = 0; j < K; ++j) {
    const int jm = (j + K - 1) % K;
    const int jp = (j + 1) % K;
    T(j, jm) += h / 6.0;
    T(j, j) += 2.0 * h / 3.0;
    T(j, jp) += h / 6.0;
    rhs[j] = (y[jp] - 2.0 * y[j] + y[jm]) / h;
  }
  return T.partialPivLu().solve(rhs);
}

}  // namespace detail

class TrackSpline {
 public:
  TrackSpline() = default;

  double length() const { return l_track_; }
  double width() const { return width_; }
  int orientation() const { return orientation_; }
  double knot_spacing() const { return h_; }
  int num_knots() const { return K_; }

  // Position and first derivative at wrapped theta.
  void eval(double theta, double& px, double& py, double& dpx, double& dpy) const {
    double ddx, ddy;
    eval2(theta, px, py, dpx, dpy, ddx, ddy);
  }

  // Position, first and second derivative at wrapped theta.
  void eval2(double theta, double& px, double& py, double& dpx, double& dpy,
             double& ddpx, double& ddpy) const {
    const double s = wrap(theta);
    int j = static_cast<int>(std::floor(s / h_));
    if (j >= K_) j = K_ - 1;
    const double a = j * h_;      // left knot
    const double b = a + h_;      // right knot
    const int jp = (j + 1) % K_;
    px = piece(xs_, Mx_, j, jp, s, a, b);
    py = piece(ys_, My_, j, jp, s, a, b);
    dpx = dpiece(xs_, Mx_, j, jp, s, a, b);
    dpy = dpiece(ys_, My_, j, jp, s, a, b);
    ddpx = (Mx_[j] * (b - s) + Mx_[jp] * (s - a)) / h_;
    ddpy = (My_[j] * (b - s) + My_[jp] * (s - a)) / h_;
  }

  Eigen::Vector2d position(double theta) const {
    double px, py, dx, dy;
    eval(theta, px, py, dx, dy);
    return {px, py};
  }

  Eigen::Vector2d tangent(double theta) const {
    double px, py, dx, dy;
    eval(theta, px, py, dx, dy);
    return {dx, dy};
  }

  double wrap(double theta) const {
    double s = std::fmod(theta, l_track_);
    if (s < 0.0) s += l_track_;
    return s;
  }

  // Fit a periodic spline through the centerline, resampled to uniform
  // arclength with knots spaced at most max_spacing, then one
  // re-parameterization pass against the fitted arclength.
  static TrackSpline fit(const Centerline& center, double max_spacing = 0.03) {
    center.validate();
    TrackSpline first = fit_points(resample_polyline(center.waypoints, max_spacing),
                                   center.width, center.orientation);
    // Re-parameterize: place knots at uniform true arclength of the fit.
    const auto arc = first.arclength_table(8);
    const double L = arc.back().second;
    const int K = static_cast<int>(std::ceil(L / max_spacing));
    std::vector<Eigen::Vector2d> pts(K);
    std::size_t seg = 0;
    for (int k = 0; k < K; ++k) {
      const double target = L * k / K;
      while (seg + 1 < arc.size() && arc[seg + 1].second < target) ++seg;
      const double s0 = arc[seg].second, s1 = arc[seg + 1].second;
      const double t0 = arc[seg].first, t1 = arc[seg + 1].first;
      const double f = s1 > s0 ? (target - s0) / (s1 - s0) : 0.0;
      pts[k] = first.position(t0 + f * (t1 - t0));
    }
    return fit_points(pts, center.width, center.orientation);
  }

 private:
  static TrackSpline fit_points(const std::vector<Eigen::Vector2d>& pts,
                                double width, int orientation) {
    const int K = static_cast<int>(pts.size());
    if (K < 4) throw std::invalid_argument("TrackSpline: too few resampled points");
    // Uniform parameter spacing equal to mean chord length keeps the
    // parameterization close to arclength.
    double chord = 0.0;
    for (int j = 0; j < K; ++j) chord += (pts[(j + 1) % K] - pts[j]).norm();
    TrackSpline s;
    s.K_ = K;
    s.l_track_ = chord;
    s.h_ = chord / K;
    s.width_ = width;
    s.orientation_ = orientation;
    s.xs_.resize(K);
    s.ys_.resize(K);
    for (int j = 0; j < K; ++j) {
      s.xs_[j] = pts[j].x();
      s.ys_[j] = pts[j].y();
    }
    s.Mx_ = detail::periodic_spline_moments(s.xs_, s.h_);
    s.My_ = detail::periodic_spline_moments(s.ys_, s.h_);
    return s;
  }

  // Resample a closed polyline (last == first) to roughly uniform chord
  // spacing <= max_spacing.
  static std::vector<Eigen::Vector2d> resample_polyline(
      const std::vector<Eigen::Vector2d>& wps, double max_spacing) {
    std::vector<double> cum{0.0};
    for (std::size_t i = 1; i < wps.size(); ++i)
      cum.push_back(cum.back() + (wps[i] - wps[i - 1]).norm());
    const double L = cum.back();
    if (!(L > 0.0)) throw std::invalid_argument("TrackSpline: degenerate centerline");
    const int K = static_cast<int>(std::ceil(L / max_spacing));
    std::vector<Eigen::Vector2d> pts(K);
    std::size_t seg = 0;
    for (int k = 0; k < K; ++k) {
      const double target = L * k / K;
      while (seg + 1 < cum.size() && cum[seg + 1] < target) ++seg;
      const double f = cum[seg + 1] > cum[seg]
                           ? (target - cum[seg]) / (cum[seg + 1] - cum[seg])
                           : 0.0;
      pts[k] = wps[seg] + f * (wps[seg + 1] - wps[seg]);
    }
    return pts;
  }

  // Table of (parameter, arclength) pairs, n_sub Gauss-Legendre-free
  // trapezoid subsamples per knot interval.
  std::vector<std::pair<double, double>> arclength_table(int n_sub) const {
    std::vector<std::pair<double, double>> tab;
    tab.reserve(static_cast<std::size_t>(K_) * n_sub + 1);
    double s = 0.0;
    double prev_norm = tangent(0.0).norm();
    double prev_t = 0.0;
    tab.emplace_back(0.0, 0.0);
    const double dt = h_ / n_sub;
    for (int j = 0; j < K_; ++j) {
      for (int q = 1; q <= n_sub; ++q) {
        const double t = j * h_ + q * dt;
        const double nrm = tangent(t).norm();
        s += 0.5 * (prev_norm + nrm) * (t - prev_t);
        tab.emplace_back(t, s);
        prev_norm = nrm;
        prev_t = t;
      }
    }
    return tab;
  }

  static double piece(const Eigen::VectorXd& y, const Eigen::VectorXd& M, int j,
                      int jp, double s, double a, double b) {
    const double h = b - a;
    return M[j] * std::pow(b - s, 3) / (6.0 * h) + M[jp] * std::pow(s - a, 3) / (6.0 * h) +
           (y[j] / h - M[j] * h / 6.0) * (b - s) + (y[jp] / h - M[jp] * h / 6.0) * (s - a);
  }
  static double dpiece(const Eigen::VectorXd& y, const Eigen::VectorXd& M, int j,
                       int jp, double s, double a, double b) {
    const double h = b - a;
    return -M[j] * (b - s) * (b - s) / (2.0 * h) + M[jp] * (s - a) * (s - a) / (2.0 * h) -
           (y[j] / h - M[j] * h / 6.0) + (y[jp] / h - M[jp] * h / 6.0);
  }

  int K_ = 0;
  double h_ = 0.0;
  double l_track_ = 0.0;
  double width_ = 0.0;
  int orientation_ = +1;
  Eigen::VectorXd xs_, ys_, Mx_, My_;
};

// pi(x) = (p_x - cx(theta))^2 + (p_y - cy(theta))^2 - (D/2)^2.
// Negative inside the track, positive outside.
inline double track_constraint(double p_x, double p_y, double theta,
                               const TrackSpline& spline, double D) {
  const Eigen::Vector2d c = spline.position(theta);
  const double dx = p_x - c.x();
  const double dy = p_y - c.y();
  return dx * dx + dy * dy - 0.25 * D * D;
}

inline double track_constraint(const VehicleState& s, const TrackSpline& spline,
                               double D) {
  return track_constraint(s.p_x, s.p_y, s.theta, spline, D);
}

inline double track_constraint(const StateVec& x, const TrackSpline& spline,
                               double D) {
  return track_constraint(x[kPx], x[kPy], x[kTheta], spline, D);
}

// Gradient of pi w.r.t. (p_x, p_y, theta).
inline Eigen::Vector3d track_constraint_gradient(double p_x, double p_y,
                                                 double theta,
                                                 const TrackSpline& spline) {
  double cx, cy, tx, ty;
  spline.eval(theta, cx, cy, tx, ty);
  const double dx = p_x - cx;
  const double dy = p_y - cy;
  return {2.0 * dx, 2.0 * dy, -2.0 * (dx * tx + dy * ty)};
}

// Hessian of pi w.r.t. (p_x, p_y, theta).
inline Eigen::Matrix3d track_constraint_hessian(double p_x, double p_y,
                                                double theta,
                                                const TrackSpline& spline) {
  double cx, cy, tx, ty, ax, ay;
  spline.eval2(theta, cx, cy, tx, ty, ax, ay);
  const double dx = p_x - cx;
  const double dy = p_y - cy;
  Eigen::Matrix3d H;
  H << 2.0, 0.0, -2.0 * tx,
       0.0, 2.0, -2.0 * ty,
       -2.0 * tx, -2.0 * ty, 2.0 * (tx * tx + ty * ty) - 2.0 * (dx * ax + dy * ay);
  return H;
}

// Linearized contouring and lag errors (cross-track / along-track deviation)
// about the progress guess theta_hat.
inline void contouring_lag_errors(double p_x, double p_y, double theta,
                                  double theta_hat, const TrackSpline& spline,
                                  double& e_C, double& e_L) {
  double cx, cy, tx, ty;
  spline.eval(theta_hat, cx, cy, tx, ty);
  const double rx = p_x - cx - tx * (theta - theta_hat);
  const double ry = p_y - cy - ty * (theta - theta_hat);
  e_C = ty * rx - tx * ry;
  e_L = tx * rx + ty * ry;
}

inline std::pair<double, double> contouring_lag_errors(const VehicleState& s,
                                                       double theta_hat,
                                                       const TrackSpline& spline) {
  double eC, eL;
  contouring_lag_errors(s.p_x, s.p_y, s.theta, theta_hat, spline, eC, eL);
  return {eC, eL};
}

// Gradients of (e_C, e_L) w.r.t. (p_x, p_y, theta); constant for fixed
// theta_hat since the errors are affine.
inline void contouring_lag_gradients(double theta_hat, const TrackSpline& spline,
                                     Eigen::Vector3d& grad_eC,
                                     Eigen::Vector3d& grad_eL) {
  double cx, cy, tx, ty;
  spline.eval(theta_hat, cx, cy, tx, ty);
  grad_eC = {ty, -tx, 0.0};
  grad_eL = {tx, ty, -(tx * tx + ty * ty)};
}

}  // namespace racer
