#pragma once

// Configuration for the contouring OCP, the solver, and closed-loop
// experiments, with JSON (de)serialization and a stable content hash used to
// tie precomputed terminal trajectories to the settings they were built for.

#include <racer/vehicle_model.hpp>

#include <Eigen/Dense>
#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>

namespace racer {

enum class SolverMode { fsqp, rti, full };

inline std::string to_string(SolverMode m) {
  switch (m) {
    case SolverMode::fsqp: return "fsqp";
    case SolverMode::rti: return "rti";
    case SolverMode::full: return "full";
  }
  return "fsqp";
}

inline SolverMode solver_mode_from_string(const std::string& s) {
  if (s == "fsqp") return SolverMode::fsqp;
  if (s == "rti") return SolverMode::rti;
  if (s == "full") return SolverMode::full;
  throw std::invalid_argument("unknown solver mode: " + s);
}

enum class HessianMode { gauss_newton, exact };

// Weights, bounds and horizon of the contouring optimal control problem.
struct OcpConfig {
  int N = 30;             // shooting nodes
  double dt = 1.0 / 30.0; // [s]

  // Stage cost weights: squared contouring/lag errors, input-rate penalties,
  // and the progress-rate tracking term (q_dtheta * (dtheta - v_bar))^2.
  double q_C = 5.0;
  double q_L = 30.0;
  double q_dtau = 0.3;
  double q_ddelta = 1.0;
  double q_dtheta = 0.5;
  double v_bar = 1.2;  // target progress rate [m/s]

  // L1 slack penalty on the softened track constraint, plus the convex
  // curvature given to slack variables inside the SQP Hessian model (the
  // penalty itself is linear; the model needs strict convexity).
  double mu_slack = 1e4;
  double slack_hessian = 100.0;

  // Input and input-rate bounds.
  double tau_min = -1.0, tau_max = 1.0;
  double delta_min = -0.35, delta_max = 0.35;
  double dtau_min = -15.0, dtau_max = 15.0;
  double ddelta_min = -6.0, ddelta_max = 6.0;
  double dtheta_min = 0.0, dtheta_max = 3.0;
  bool bound_dtheta = true;  // include dtheta bounds in the inequality block

  // Terminal ball ||x_N - x_f(t)||^2_W <= r_f^2 with diagonal W; angle-like
  // components (heading, arclength) are compared modulo wrapping.
  Eigen::Matrix<double, kNx, 1> terminal_weights =
      (Eigen::Matrix<double, kNx, 1>() << 1.0, 1.0, 0.2, 0.2, 0.2, 0.05, 0.05,
       0.05, 1.0)
          .finished();
  double r_f = 0.05;

  void validate() const {
    if (N < 2) throw std::invalid_argument("OcpConfig: N must be >= 2");
    if (dt <= 0.0) throw std::invalid_argument("OcpConfig: dt must be > 0");
    if (mu_slack <= 0.0)
      throw std::invalid_argument("OcpConfig: mu_slack must be > 0");
    if (slack_hessian <= 0.0)
      throw std::invalid_argument("OcpConfig: slack_hessian must be > 0");
    if (tau_max <= tau_min || delta_max <= delta_min || dtau_max <= dtau_min ||
        ddelta_max <= ddelta_min || dtheta_max <= dtheta_min)
      throw std::invalid_argument("OcpConfig: every max bound must exceed min");
    if (q_C < 0 || q_L < 0 || q_dtau < 0 || q_ddelta < 0 || q_dtheta < 0)
      throw std::invalid_argument("OcpConfig: weights must be >= 0");
    if (r_f <= 0.0) throw std::invalid_argument("OcpConfig: r_f must be > 0");
    if (terminal_weights.minCoeff() <= 0.0)
      throw std::invalid_argument("OcpConfig: terminal weights must be > 0");
  }
};

struct SolverSettings {
  SolverMode mode = SolverMode::fsqp;
  int i_max = 1;          // outer iterations per control step (fsqp/rti)
  int inner_max = 20;     // inner QP solves per outer iteration (fsqp)
  int full_i_max = 50;    // outer iterations for full_solve
  double eps_tol = 1e-6;  // inner-loop step-size stopping tolerance
  double feas_tol = 1e-6; // nonlinear feasibility certificate tolerance
  double qp_tol = 1e-8;
  int qp_max_iter = 2000;
  // Cap on the primal step length per QP solve; leaves fixed points unchanged
  // but keeps iterates inside the region where the frozen linearization is
  // trustworthy. Infinite by default (full steps).
  double step_max = std::numeric_limits<double>::infinity();
  // Backtracking line search on an exact l1 merit function in full_solve;
  // needed for the offline trajectory problems, off for the controller.
  bool line_search = false;
  HessianMode hessian = HessianMode::gauss_newton;
};

// One closed-loop benchmark run.
struct ExperimentSpec {
  std::string track_file;
  std::string terminal_file;  // precomputed terminal trajectory artifact
  VehicleParams vehicle;
  OcpConfig ocp;
  SolverSettings solver;
  int laps = 10;
  std::uint64_t seed = 1;
  double noise_sigma = 0.0;  // stddev of per-step position disturbance [m]
  int m_shift = 1;           // controls applied open loop per solve
};

inline void to_json(nlohmann::json& j, const VehicleParams& p) {
  j = {{"m", p.m},         {"I_z", p.I_z},   {"l_f", p.l_f},
       {"l_r", p.l_r},     {"B_f", p.B_f},   {"C_f", p.C_f},
       {"D_f", p.D_f},     {"B_r", p.B_r},   {"C_r", p.C_r},
       {"D_r", p.D_r},     {"C_m1", p.C_m1}, {"C_m2", p.C_m2},
       {"C_d", p.C_d},     {"C_roll", p.C_roll},
       {"epsilon_v", p.epsilon_v}};
}

inline void from_json(const nlohmann::json& j, VehicleParams& p) {
  p = VehicleParams{};
  auto get = [&](const char* k, double& v) {
    if (j.contains(k)) v = j.at(k).get<double>();
  };
  get("m", p.m); get("I_z", p.I_z); get("l_f", p.l_f); get("l_r", p.l_r);
  get("B_f", p.B_f); get("C_f", p.C_f); get("D_f", p.D_f);
  get("B_r", p.B_r); get("C_r", p.C_r); get("D_r", p.D_r);
  get("C_m1", p.C_m1); get("C_m2", p.C_m2); get("C_d", p.C_d);
  get("C_roll", p.C_roll); get("epsilon_v", p.epsilon_v);
  p.validate();
}

inline void to_json(nlohmann::json& j, const OcpConfig& c) {
  j = {{"N", c.N},
       {"dt", c.dt},
       {"q_C", c.q_C},
       {"q_L", c.q_L},
       {"q_dtau", c.q_dtau},
       {"q_ddelta", c.q_ddelta},
       {"q_dtheta", c.q_dtheta},
       {"v_bar", c.v_bar},
       {"mu_slack", c.mu_slack},
       {"slack_hessian", c.slack_hessian},
       {"tau_min", c.tau_min},
       {"tau_max", c.tau_max},
       {"delta_min", c.delta_min},
       {"delta_max", c.delta_max},
       {"dtau_min", c.dtau_min},
       {"dtau_max", c.dtau_max},
       {"ddelta_min", c.ddelta_min},
       {"ddelta_max", c.ddelta_max},
       {"dtheta_min", c.dtheta_min},
       {"dtheta_max", c.dtheta_max},
       {"bound_dtheta", c.bound_dtheta},
       {"r_f", c.r_f}};
  j["terminal_weights"] = std::vector<double>(
      c.terminal_weights.data(), c.terminal_weights.data() + kNx);
}

inline void from_json(const nlohmann::json& j, OcpConfig& c) {
  c = OcpConfig{};
  auto get = [&](const char* k, auto& v) {
    if (j.contains(k)) j.at(k).get_to(v);
  };
  get("N", c.N); get("dt", c.dt);
  get("q_C", c.q_C); get("q_L", c.q_L); get("q_dtau", c.q_dtau);
  get("q_ddelta", c.q_ddelta); get("q_dtheta", c.q_dtheta);
  get("v_bar", c.v_bar);
  get("mu_slack", c.mu_slack); get("slack_hessian", c.slack_hessian);
  get("tau_min", c.tau_min); get("tau_max", c.tau_max);
  get("delta_min", c.delta_min); get("delta_max", c.delta_max);
  get("dtau_min", c.dtau_min); get("dtau_max", c.dtau_max);
  get("ddelta_min", c.ddelta_min); get("ddelta_max", c.ddelta_max);
  get("dtheta_min", c.dtheta_min); get("dtheta_max", c.dtheta_max);
  get("bound_dtheta", c.bound_dtheta);
  get("r_f", c.r_f);
  if (j.contains("terminal_weights")) {
    auto w = j.at("terminal_weights").get<std::vector<double>>();
    if (static_cast<int>(w.size()) != kNx)
      throw std::invalid_argument("terminal_weights must have 9 entries");
    for (int i = 0; i < kNx; ++i) c.terminal_weights[i] = w[i];
  }
  c.validate();
}

inline void to_json(nlohmann::json& j, const SolverSettings& s) {
  j = {{"mode", to_string(s.mode)},
       {"i_max", s.i_max},
       {"inner_max", s.inner_max},
       {"full_i_max", s.full_i_max},
       {"eps_tol", s.eps_tol},
       {"feas_tol", s.feas_tol},
       {"qp_tol", s.qp_tol},
       {"qp_max_iter", s.qp_max_iter},
       {"step_max", std::isfinite(s.step_max) ? s.step_max : -1.0},
       {"line_search", s.line_search},
       {"hessian",
        s.hessian == HessianMode::gauss_newton ? "gauss_newton" : "exact"}};
}

inline void from_json(const nlohmann::json& j, SolverSettings& s) {
  s = SolverSettings{};
  if (j.contains("mode")) s.mode = solver_mode_from_string(j.at("mode"));
  auto get = [&](const char* k, auto& v) {
    if (j.contains(k)) j.at(k).get_to(v);
  };
  get("i_max", s.i_max); get("inner_max", s.inner_max);
  get("full_i_max", s.full_i_max);
  get("eps_tol", s.eps_tol); get("feas_tol", s.feas_tol);
  get("qp_tol", s.qp_tol); get("qp_max_iter", s.qp_max_iter);
  if (j.contains("line_search")) s.line_search = j.at("line_search");
  if (j.contains("step_max")) {
    const double v = j.at("step_max").get<double>();
    s.step_max = v > 0.0 ? v : std::numeric_limits<double>::infinity();
  }
  if (j.contains("hessian")) {
    std::string h = j.at("hessian");
    if (h == "gauss_newton") s.hessian = HessianMode::gauss_newton;
    else if (h == "exact") s.hessian = HessianMode::exact;
    else throw std::invalid_argument("unknown hessian mode: " + h);
  }
}

inline void to_json(nlohmann::json& j, const ExperimentSpec& e) {
  j = {{"track_file", e.track_file},
       {"terminal_file", e.terminal_file},
       {"vehicle", e.vehicle},
       {"ocp", e.ocp},
       {"solver", e.solver},
       {"laps", e.laps},
       {"seed", e.seed},
       {"noise_sigma", e.noise_sigma},
       {"m_shift", e.m_shift}};
}

inline void from_json(const nlohmann::json& j, ExperimentSpec& e) {
  e = ExperimentSpec{};
  auto get = [&](const char* k, auto& v) {
    if (j.contains(k)) j.at(k).get_to(v);
  };
  get("track_file", e.track_file);
  get("terminal_file", e.terminal_file);
  get("vehicle", e.vehicle);
  get("ocp", e.ocp);
  get("solver", e.solver);
  get("laps", e.laps);
  get("seed", e.seed);
  get("noise_sigma", e.noise_sigma);
  get("m_shift", e.m_shift);
}

template <typename T>
T load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  nlohmann::json j;
  in >> j;
  return j.get<T>();
}

template <typename T>
void save_json_file(const T& value, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  nlohmann::json j = value;
  out << j.dump(2) << "\n";
}

// FNV-1a over the canonical JSON encoding; stable across runs and platforms.
inline std::uint64_t config_hash(const nlohmann::json& j) {
  const std::string s = j.dump();
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace racer
