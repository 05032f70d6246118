#pragma once

// Abstract nonlinear program
//
//   min_y f(y)   s.t.  g(y) = 0,  h(y) <= 0,
//
// consumed by the SQP solver. Implementations must be pure in the evaluation
// methods (no mutation of shared state) so one problem instance can be
// evaluated from several solver instances concurrently.

#include <racer/qp.hpp>

#include <Eigen/Dense>

#include <optional>

namespace racer {

class NlpProblem {
 public:
  virtual ~NlpProblem() = default;

  virtual int n() const = 0;      // decision variables
  virtual int n_eq() const = 0;   // dim g
  virtual int n_ineq() const = 0; // dim h

  virtual double objective(const Eigen::VectorXd& y) const = 0;
  virtual Eigen::VectorXd gradient(const Eigen::VectorXd& y) const = 0;
  virtual Eigen::VectorXd eval_g(const Eigen::VectorXd& y) const = 0;
  virtual Eigen::VectorXd eval_h(const Eigen::VectorXd& y) const = 0;
  virtual Eigen::MatrixXd jacobian_g(const Eigen::VectorXd& y) const = 0;
  virtual Eigen::MatrixXd jacobian_h(const Eigen::VectorXd& y) const = 0;

  // Convex model Hessian M used for every QP of an outer iteration.
  virtual Eigen::MatrixXd hessian_M(const Eigen::VectorXd& y) const = 0;

  // Approximation P of the Lagrangian Hessian used to perturb the gradient
  // between inner iterations; defaults to M.
  virtual Eigen::MatrixXd hessian_P(const Eigen::VectorXd& y,
                                    const Eigen::VectorXd& lambda,
                                    const Eigen::VectorXd& mu) const {
    (void)lambda;
    (void)mu;
    return hessian_M(y);
  }

  // Positive-definite Hessian used for the QPs of an outer iteration. The
  // choice does not move the solver's fixed points (any PD matrix yields the
  // same stationarity conditions at a zero step), but curvature-aware choices
  // enlarge the convergence basin dramatically when the dynamics are stiff.
  // Defaults to M; implementations may blend in multiplier-weighted
  // constraint curvature as long as the result stays positive definite.
  virtual Eigen::MatrixXd qp_hessian(const Eigen::VectorXd& y,
                                     const Eigen::VectorXd& lambda,
                                     const Eigen::VectorXd& mu) const {
    (void)lambda;
    (void)mu;
    return hessian_M(y);
  }

  // Present when the equality Jacobian has the stage-chain layout the QP
  // solver can eliminate without a dense factorization.
  virtual std::optional<StageStructure> stage_structure() const {
    return std::nullopt;
  }
};

}  // namespace racer
