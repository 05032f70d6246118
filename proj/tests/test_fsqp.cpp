#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <racer/fsqp.hpp>

#include <cmath>

using namespace racer;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

// min x1 + x2  s.t.  x1^2 + x2^2 = 1; optimum (-sqrt(2)/2, -sqrt(2)/2).
class CircleNlp : public NlpProblem {
 public:
  int n() const override { return 2; }
  int n_eq() const override { return 1; }
  int n_ineq() const override { return 0; }
  double objective(const VectorXd& y) const override { return y[0] + y[1]; }
  VectorXd gradient(const VectorXd&) const override {
    return VectorXd::Ones(2);
  }
  VectorXd eval_g(const VectorXd& y) const override {
    VectorXd g(1);
    g[0] = y.squaredNorm() - 1.0;
    return g;
  }
  VectorXd eval_h(const VectorXd&) const override { return VectorXd(0); }
  MatrixXd jacobian_g(const VectorXd& y) const override {
    return 2.0 * y.transpose();
  }
  MatrixXd jacobian_h(const VectorXd&) const override {
    return MatrixXd(0, 2);
  }
  MatrixXd hessian_M(const VectorXd&) const override {
    return MatrixXd::Identity(2, 2);
  }
  // hessian_P defaults to M; the exact Lagrangian Hessian 2*lambda*I vanishes
  // at a cold start and gives no restoring force to the inner iteration.
};

// min (x1-2)^2 + x2^2  s.t.  x1^2 + x2^2 - 1 <= 0; optimum (1,0), mu = 1.
class BallNlp : public NlpProblem {
 public:
  int n() const override { return 2; }
  int n_eq() const override { return 0; }
  int n_ineq() const override { return 1; }
  double objective(const VectorXd& y) const override {
    return (y[0] - 2.0) * (y[0] - 2.0) + y[1] * y[1];
  }
  VectorXd gradient(const VectorXd& y) const override {
    VectorXd g(2);
    g << 2.0 * (y[0] - 2.0), 2.0 * y[1];
    return g;
  }
  VectorXd eval_g(const VectorXd&) const override { return VectorXd(0); }
  VectorXd eval_h(const VectorXd& y) const override {
    VectorXd h(1);
    h[0] = y.squaredNorm() - 1.0;
    return h;
  }
  MatrixXd jacobian_g(const VectorXd&) const override { return MatrixXd(0, 2); }
  MatrixXd jacobian_h(const VectorXd& y) const override {
    return 2.0 * y.transpose();
  }
  MatrixXd hessian_M(const VectorXd&) const override {
    return 2.0 * MatrixXd::Identity(2, 2);
  }
};

VectorXd pt(double a, double b) {
  VectorXd v(2);
  v << a, b;
  return v;
}

}  // namespace

TEST_CASE("converged SQP solves the equality toy problem") {
  CircleNlp nlp;
  SolverSettings s;
  s.full_i_max = 200;
  s.step_max = 0.3;
  s.eps_tol = 1e-10;
  FsqpSolver solver(s);
  auto r = solver.full_solve(nlp, Iterate::cold(nlp, pt(0.8, 0.6)));
  REQUIRE(r.converged);
  const double v = -std::sqrt(2.0) / 2.0;
  CHECK(r.z.y[0] == doctest::Approx(v).epsilon(1e-8));
  CHECK(r.z.y[1] == doctest::Approx(v).epsilon(1e-8));
  CHECK(r.z.lambda[0] == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-6));
  CHECK(r.feasible);
}

TEST_CASE("feasible SQP reaches the same optimum") {
  // Feasible start within the contraction region of the frozen-derivative
  // inner loop; far starts can hit outer iterates whose frozen linearization
  // admits no feasible fixed point, which the solver reports as failure.
  CircleNlp nlp;
  SolverSettings s;
  s.i_max = 30;
  s.step_max = 0.3;
  s.inner_max = 50;
  s.eps_tol = 1e-10;
  FsqpSolver solver(s);
  auto r = solver.solve(nlp, Iterate::cold(nlp, pt(-0.6, -0.8)));
  REQUIRE(r.converged);
  const double v = -std::sqrt(2.0) / 2.0;
  CHECK(r.z.y[0] == doctest::Approx(v).epsilon(1e-7));
  CHECK(r.z.y[1] == doctest::Approx(v).epsilon(1e-7));
  CHECK(r.feasible);
  CHECK(r.certificate <= 1e-8);
}

TEST_CASE("every accepted outer iterate is nonlinearly feasible") {
  CircleNlp nlp;
  SolverSettings s;
  s.i_max = 6;
  s.inner_max = 50;
  s.eps_tol = 1e-10;
  s.step_max = 0.3;
  FsqpSolver solver(s);
  // Run outer iterations one at a time so each intermediate iterate is
  // observable, starting from a feasible but far-from-optimal point.
  Iterate z = Iterate::cold(nlp, pt(-0.6, -0.8));
  for (int i = 0; i < 30; ++i) {
    SolverSettings one = s;
    one.i_max = 1;
    FsqpSolver step(one);
    auto r = step.solve(nlp, z);
    if (!r.converged) break;
    z = r.z;
    CHECK(std::abs(nlp.eval_g(z.y)[0]) <= 1e-8);
  }
  CHECK(nlp.objective(z.y) ==
        doctest::Approx(-std::sqrt(2.0)).epsilon(1e-5));
}

TEST_CASE("real-time iteration converges over repeated steps") {
  CircleNlp nlp;
  SolverSettings s;
  s.i_max = 60;
  s.step_max = 0.3;
  FsqpSolver solver(s);
  auto r = solver.rti_solve(nlp, Iterate::cold(nlp, pt(0.8, 0.6)));
  const double v = -std::sqrt(2.0) / 2.0;
  CHECK(r.z.y[0] == doctest::Approx(v).epsilon(1e-7));
  CHECK(r.z.y[1] == doctest::Approx(v).epsilon(1e-7));
}

TEST_CASE("with a loose inner tolerance one fSQP step equals one RTI step") {
  // At the start of an inner loop the moving point equals the outer point, so
  // the first QP is exactly the conventional SQP subproblem.
  CircleNlp nlp;
  SolverSettings s;
  s.i_max = 1;
  s.eps_tol = 1e12;  // accept the first inner step unconditionally
  FsqpSolver fs(s);
  auto rf = fs.solve(nlp, Iterate::cold(nlp, pt(0.8, 0.6)));

  SolverSettings sr = s;
  FsqpSolver rs(sr);
  auto rr = rs.rti_solve(nlp, Iterate::cold(nlp, pt(0.8, 0.6)));
  REQUIRE(rf.outer_iterations == 1);
  CHECK((rf.z.y - rr.z.y).lpNorm<Eigen::Infinity>() <= 1e-12);
  CHECK((rf.z.lambda - rr.z.lambda).lpNorm<Eigen::Infinity>() <= 1e-12);
}

TEST_CASE("inequality toy problem: active constraint and multiplier") {
  BallNlp nlp;
  SolverSettings s;
  s.i_max = 40;
  s.step_max = 0.3;
  s.inner_max = 50;
  s.eps_tol = 1e-10;
  FsqpSolver solver(s);
  // Start near the boundary: the inner loop contracts only when the frozen
  // constraint gradient is close to its value at the fixed point (and it
  // degenerates entirely at the ball's center).
  auto r = solver.solve(nlp, Iterate::cold(nlp, pt(0.8, 0.0)));
  REQUIRE(r.converged);
  CHECK(r.z.y[0] == doctest::Approx(1.0).epsilon(1e-7));
  CHECK(r.z.y[1] == doctest::Approx(0.0).epsilon(1e-7));
  CHECK(r.z.mu[0] == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(r.feasible);
  // The converged point satisfies the nonlinear constraint, not merely its
  // linearization.
  CHECK(nlp.eval_h(r.z.y)[0] <= 1e-8);
}

TEST_CASE("feasibility certificate reports the worst violation") {
  BallNlp nlp;
  CHECK(feasibility_certificate(nlp, pt(0.0, 0.0)) == 0.0);
  CHECK(feasibility_certificate(nlp, pt(1.1, 0.0)) ==
        doctest::Approx(0.21).epsilon(1e-12));
  CircleNlp eq;
  CHECK(feasibility_certificate(eq, pt(1.0, 1.0)) ==
        doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("per-iteration records are populated") {
  CircleNlp nlp;
  SolverSettings s;
  s.i_max = 3;
  s.step_max = 0.3;
  s.inner_max = 50;
  s.eps_tol = 1e-10;
  FsqpSolver solver(s);
  auto r = solver.solve(nlp, Iterate::cold(nlp, pt(-0.6, -0.8)));
  REQUIRE(static_cast<int>(r.records.size()) == r.outer_iterations);
  for (const auto& rec : r.records) {
    CHECK(rec.inner_iterations >= 1);
    CHECK(rec.time_ms >= 0.0);
    CHECK(rec.feasibility <= 1e-8);
  }
}
