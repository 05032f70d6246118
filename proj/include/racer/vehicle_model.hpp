// Dynamic bicycle model with Pacejka tires: continuous dynamics, RK4
// discretization with additive position disturbance, and analytic Jacobians.
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace racer {

using StateVec = Eigen::Matrix<double, 9, 1>;
using InputVec = Eigen::Matrix<double, 3, 1>;
using StateJac = Eigen::Matrix<double, 9, 9>;
using InputJac = Eigen::Matrix<double, 9, 3>;

// State layout: x = (p_x, p_y, gamma, v_f, v_l, omega, tau, delta, theta)
enum StateIndex : int {
  kPx = 0,
  kPy = 1,
  kGamma = 2,
  kVf = 3,
  kVl = 4,
  kOmega = 5,
  kTau = 6,
  kDelta = 7,
  kTheta = 8,
};

// Input layout: u = (d_tau, d_delta, d_theta)
enum InputIndex : int {
  kDtau = 0,
  kDdelta = 1,
  kDtheta = 2,
};

constexpr int kNx = 9;
constexpr int kNu = 3;

struct VehicleState {
  double p_x = 0.0;
  double p_y = 0.0;
  double gamma = 0.0;
  double v_f = 0.0;
  double v_l = 0.0;
  double omega = 0.0;
  double tau = 0.0;
  double delta = 0.0;
  double theta = 0.0;

  StateVec vec() const {
    StateVec x;
    x << p_x, p_y, gamma, v_f, v_l, omega, tau, delta, theta;
    return x;
  }
  static VehicleState from_vec(const StateVec& x) {
    return {x[kPx], x[kPy], x[kGamma], x[kVf], x[kVl],
            x[kOmega], x[kTau], x[kDelta], x[kTheta]};
  }
};

struct ControlInput {
  double d_tau = 0.0;
  double d_delta = 0.0;
  double d_theta = 0.0;

  InputVec vec() const { return InputVec(d_tau, d_delta, d_theta); }
  static ControlInput from_vec(const InputVec& u) { return {u[0], u[1], u[2]}; }
};

// Additive displacement on (p_x, p_y), applied after one discrete step.
using Disturbance = Eigen::Vector2d;

struct VehicleParams {
  double m = 0.17;        // [kg]
  double I_z = 3.0e-4;    // [kg m^2]
  double l_f = 0.047;     // [m]
  double l_r = 0.051;     // [m]
  double B_f = 6.0;
  double C_f = 1.5;
  double D_f = 0.75;      // [N]
  double B_r = 6.5;
  double C_r = 1.5;
  double D_r = 0.85;      // [N]
  double C_m1 = 1.5;
  double C_m2 = 0.25;
  double C_d = 0.05;
  double C_roll = 0.05;
  double epsilon_v = 0.05;  // low-speed slip regularization [m/s]

  void validate() const {
    if (!(m > 0.0 && I_z > 0.0 && l_f > 0.0 && l_r > 0.0))
      throw std::invalid_argument("VehicleParams: m, I_z, l_f, l_r must be positive");
    if (!(D_f >= 0.0 && D_r >= 0.0))
      throw std::invalid_argument("VehicleParams: D_f, D_r must be nonnegative");
    if (!(epsilon_v > 0.0))
      throw std::invalid_argument("VehicleParams: epsilon_v must be positive");
  }
};

struct TireForces {
  double F_f = 0.0;  // front lateral [N]
  double F_r = 0.0;  // rear lateral [N]
  double F_x = 0.0;  // longitudinal [N]
};

inline TireForces tire_forces(const StateVec& x, const VehicleParams& p) {
  const double v_reg = std::max(x[kVf], p.epsilon_v);
  const double alpha_f =
      -std::atan(x[kVl] / v_reg) - p.l_f * x[kOmega] / v_reg + x[kDelta];
  const double alpha_r =
      -std::atan(x[kVl] / v_reg) + p.l_r * x[kOmega] / v_reg;
  TireForces f;
  f.F_f = p.D_f * std::sin(p.C_f * std::atan(p.B_f * alpha_f));
  f.F_r = p.D_r * std::sin(p.C_r * std::atan(p.B_r * alpha_r));
  f.F_x = (p.C_m1 - p.C_m2 * x[kVf]) * x[kTau] - p.C_d * x[kVf] * x[kVf] - p.C_roll;
  return f;
}

inline TireForces tire_forces(const VehicleState& s, const VehicleParams& p) {
  return tire_forces(s.vec(), p);
}

// Right-hand side of the bicycle-model ODE.
inline StateVec continuous_dynamics(const StateVec& x, const InputVec& u,
                                    const VehicleParams& p) {
  const TireForces f = tire_forces(x, p);
  const double cg = std::cos(x[kGamma]);
  const double sg = std::sin(x[kGamma]);
  const double cd = std::cos(x[kDelta]);
  const double sd = std::sin(x[kDelta]);
  StateVec dx;
  dx[kPx] = x[kVf] * cg - x[kVl] * sg;
  dx[kPy] = x[kVf] * sg + x[kVl] * cg;
  dx[kGamma] = x[kOmega];
  dx[kVf] = (f.F_x - f.F_f * sd) / p.m + x[kVl] * x[kOmega];
  dx[kVl] = (f.F_r + f.F_f * cd) / p.m - x[kVf] * x[kOmega];
  dx[kOmega] = (f.F_f * p.l_f * cd - f.F_r * p.l_r) / p.I_z;
  dx[kTau] = u[kDtau];
  dx[kDelta] = u[kDdelta];
  dx[kTheta] = u[kDtheta];
  return dx;
}

// Jacobian of continuous_dynamics w.r.t. the state.
inline StateJac dynamics_state_jacobian(const StateVec& x, const VehicleParams& p) {
  StateJac A = StateJac::Zero();
  const double cg = std::cos(x[kGamma]);
  const double sg = std::sin(x[kGamma]);
  const double cd = std::cos(x[kDelta]);
  const double sd = std::sin(x[kDelta]);
  const double v_f = x[kVf], v_l = x[kVl], om = x[kOmega];
  const double v_reg = std::max(v_f, p.epsilon_v);
  const bool v_active = v_f > p.epsilon_v;  // v_reg differentiable branch

  const double alpha_f = -std::atan(v_l / v_reg) - p.l_f * om / v_reg + x[kDelta];
  const double alpha_r = -std::atan(v_l / v_reg) + p.l_r * om / v_reg;

  // d atan(v_l / v_reg) / d v_l and / d v_reg
  const double denom = v_reg * v_reg + v_l * v_l;
  const double datan_dvl = v_reg / denom;
  // slip-angle partials
  const double daf_dvl = -datan_dvl;
  const double dar_dvl = -datan_dvl;
  const double daf_dvf = v_active ? (v_l / denom + p.l_f * om / (v_reg * v_reg)) : 0.0;
  const double dar_dvf = v_active ? (v_l / denom - p.l_r * om / (v_reg * v_reg)) : 0.0;
  const double daf_dom = -p.l_f / v_reg;
  const double dar_dom = p.l_r / v_reg;
  const double daf_dd = 1.0;

  auto dF_dalpha = [](double B, double C, double D, double a) {
    return D * std::cos(C * std::atan(B * a)) * C * B / (1.0 + B * B * a * a);
  };
  const double dFf = dF_dalpha(p.B_f, p.C_f, p.D_f, alpha_f);
  const double dFr = dF_dalpha(p.B_r, p.C_r, p.D_r, alpha_r);
  const TireForces f = tire_forces(x, p);

  const double dFx_dvf = -p.C_m2 * x[kTau] - 2.0 * p.C_d * v_f;
  const double dFx_dtau = p.C_m1 - p.C_m2 * v_f;

  // rows p_x, p_y
  A(kPx, kGamma) = -v_f * sg - v_l * cg;
  A(kPx, kVf) = cg;
  A(kPx, kVl) = -sg;
  A(kPy, kGamma) = v_f * cg - v_l * sg;
  A(kPy, kVf) = sg;
  A(kPy, kVl) = cg;
  // row gamma
  A(kGamma, kOmega) = 1.0;
  // row v_f: (F_x - F_f sin d)/m + v_l om
  A(kVf, kVf) = (dFx_dvf - sd * dFf * daf_dvf) / p.m;
  A(kVf, kVl) = (-sd * dFf * daf_dvl) / p.m + om;
  A(kVf, kOmega) = (-sd * dFf * daf_dom) / p.m + v_l;
  A(kVf, kTau) = dFx_dtau / p.m;
  A(kVf, kDelta) = (-f.F_f * cd - sd * dFf * daf_dd) / p.m;
  // row v_l: (F_r + F_f cos d)/m - v_f om
  A(kVl, kVf) = (dFr * dar_dvf + cd * dFf * daf_dvf) / p.m - om;
  A(kVl, kVl) = (dFr * dar_dvl + cd * dFf * daf_dvl) / p.m;
  A(kVl, kOmega) = (dFr * dar_dom + cd * dFf * daf_dom) / p.m - v_f;
  A(kVl, kDelta) = (cd * dFf * daf_dd - f.F_f * sd) / p.m;
  // row omega: (F_f l_f cos d - F_r l_r)/I_z
  A(kOmega, kVf) = (p.l_f * cd * dFf * daf_dvf - p.l_r * dFr * dar_dvf) / p.I_z;
  A(kOmega, kVl) = (p.l_f * cd * dFf * daf_dvl - p.l_r * dFr * dar_dvl) / p.I_z;
  A(kOmega, kOmega) = (p.l_f * cd * dFf * daf_dom - p.l_r * dFr * dar_dom) / p.I_z;
  A(kOmega, kDelta) = (p.l_f * (cd * dFf * daf_dd - f.F_f * sd)) / p.I_z;
  return A;
}

inline InputJac dynamics_input_jacobian() {
  InputJac B = InputJac::Zero();
  B(kTau, kDtau) = 1.0;
  B(kDelta, kDdelta) = 1.0;
  B(kTheta, kDtheta) = 1.0;
  return B;
}

// One classical RK4 step of the nominal model, then the disturbance is added
// to the positions: psi(x, u, w).
inline StateVec discrete_step(const StateVec& x, const InputVec& u,
                              const Disturbance& w, const VehicleParams& p,
                              double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("discrete_step: dt must be positive");
  const StateVec k1 = continuous_dynamics(x, u, p);
  const StateVec k2 = continuous_dynamics(x + 0.5 * dt * k1, u, p);
  const StateVec k3 = continuous_dynamics(x + 0.5 * dt * k2, u, p);
  const StateVec k4 = continuous_dynamics(x + dt * k3, u, p);
  StateVec next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  next[kPx] += w[0];
  next[kPy] += w[1];
  return next;
}

// Jacobians of the nominal RK4 step w.r.t. state and input.
inline void discrete_step_jacobians(const StateVec& x, const InputVec& u,
                                    const VehicleParams& p, double dt,
                                    StateJac& Jx, InputJac& Ju) {
  const InputJac B = dynamics_input_jacobian();
  const StateVec k1 = continuous_dynamics(x, u, p);
  const StateVec x2 = x + 0.5 * dt * k1;
  const StateVec k2 = continuous_dynamics(x2, u, p);
  const StateVec x3 = x + 0.5 * dt * k2;
  const StateVec k3 = continuous_dynamics(x3, u, p);
  const StateVec x4 = x + dt * k3;

  const StateJac A1 = dynamics_state_jacobian(x, p);
  const StateJac A2 = dynamics_state_jacobian(x2, p);
  const StateJac A3 = dynamics_state_jacobian(x3, p);
  const StateJac A4 = dynamics_state_jacobian(x4, p);

  const StateJac I = StateJac::Identity();
  const StateJac K1x = A1;
  const StateJac K2x = A2 * (I + 0.5 * dt * K1x);
  const StateJac K3x = A3 * (I + 0.5 * dt * K2x);
  const StateJac K4x = A4 * (I + dt * K3x);
  Jx = I + (dt / 6.0) * (K1x + 2.0 * K2x + 2.0 * K3x + K4x);

  const InputJac K1u = B;
  const InputJac K2u = A2 * (0.5 * dt * K1u) + B;
  const InputJac K3u = A3 * (0.5 * dt * K2u) + B;
  const InputJac K4u = A4 * (dt * K3u) + B;
  Ju = (dt / 6.0) * (K1u + 2.0 * K2u + 2.0 * K3u + K4u);
}

// k-fold composition of discrete_step (phi in the k-step simulation sense).
inline StateVec simulate(const StateVec& x0, const std::vector<InputVec>& inputs,
                         const std::vector<Disturbance>& disturbances,
                         const VehicleParams& p, double dt) {
  if (inputs.size() != disturbances.size() || inputs.empty())
    throw std::invalid_argument("simulate: input/disturbance length mismatch");
  StateVec x = x0;
  for (std::size_t i = 0; i < inputs.size(); ++i)
    x = discrete_step(x, inputs[i], disturbances[i], p, dt);
  return x;
}

}  // namespace racer
