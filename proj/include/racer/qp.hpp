// Strictly convex QP solver: equality elimination followed by a dual
// active-set method (Goldfarb-Idnani) on the reduced inequality-constrained
// problem. Supports warm starting with a prior active set and caches the
// matrix factorizations so repeated solves with new vectors (frozen-derivative
// inner iterations) are cheap.
//
// Problem form:
//   min  1/2 dy' H dy + c' dy
//   s.t. A dy + b  = 0
//        G dy + d <= 0
#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <vector>

namespace racer {

// Describes the stage-wise layout of an optimal control QP:
//   y = (x_0..x_N, u_0..u_{N-1}, s_0..s_{n_slack-1})
//   equality rows = [ x_0 block (identity); N dynamics blocks ]
// The Hessian must be stage-block-diagonal (x blocks, u blocks, slack
// diagonal). With this layout the equality constraints are eliminated by
// forward sensitivity propagation instead of a dense QR.
struct StageStructure {
  int nx = 0;
  int nu = 0;
  int N = 0;
  int n_slack = 0;

  int n() const { return nx * (N + 1) + nu * N + n_slack; }
  int n_eq() const { return nx * (N + 1); }
  int x_off(int i) const { return nx * i; }
  int u_off(int i) const { return nx * (N + 1) + nu * i; }
  int s_off(int i) const { return nx * (N + 1) + nu * N + i; }
};

enum class QpStatus { optimal, infeasible, max_iter };

struct QpData {
  Eigen::MatrixXd H;
  Eigen::VectorXd c;
  Eigen::MatrixXd A;
  Eigen::VectorXd b;
  Eigen::MatrixXd G;
  Eigen::VectorXd d;
  std::optional<StageStructure> structure;
};

struct QpSolution {
  Eigen::VectorXd dy;
  Eigen::VectorXd lambda;       // equality multipliers
  Eigen::VectorXd mu;           // inequality multipliers, >= 0
  QpStatus status = QpStatus::max_iter;
  std::vector<int> active_set;  // inequality rows active at the solution
  int iterations = 0;
  double kkt_residual = std::numeric_limits<double>::quiet_NaN();
};

struct QpOptions {
  double tol = 1e-8;    // KKT tolerance on the returned solution
  int max_iter = 2000;  // active-set change cap
};

class QpSolver {
 public:
  explicit QpSolver(QpOptions opts = {}) : opts_(opts) {}

  const QpOptions& options() const { return opts_; }

  // Factorizes H and the equality structure; G is scanned for sparsity.
  // Must be called before solve(); reused across solves with new vectors.
  void set_matrices(const Eigen::MatrixXd& H, const Eigen::MatrixXd& A,
                    const Eigen::MatrixXd& G,
                    const std::optional<StageStructure>& structure = std::nullopt) {
    n_ = static_cast<int>(H.rows());
    m_eq_ = static_cast<int>(A.rows());
    m_in_ = static_cast<int>(G.rows());
    structure_ = structure;
    if (structure_ && (structure_->n() != n_ || structure_->n_eq() != m_eq_))
      throw std::invalid_argument("QpSolver: stage structure dimension mismatch");

    if (m_eq_ == 0) {
      nv_ = n_;
      Z_.resize(0, 0);
      Hred_ = H;
    } else if (structure_) {
      build_staged(H, A);
    } else {
      build_dense(H, A);
    }
    // Inequality rows reduced: Gred = G * Z (or G itself without equalities).
    grows_.clear();
    grows_.resize(m_in_);
    for (int r = 0; r < m_in_; ++r)
      for (int j = 0; j < n_; ++j)
        if (G(r, j) != 0.0) grows_[r].emplace_back(j, G(r, j));
    Gred_.resize(m_in_, nv_);
    if (m_eq_ == 0) {
      Gred_ = G;
    } else {
      Gred_.setZero();
      for (int r = 0; r < m_in_; ++r)
        for (const auto& [j, gv] : grows_[r]) Gred_.row(r) += gv * Z_.row(j);
    }
    llt_.compute(Hred_);
    if (llt_.info() != Eigen::Success)
      throw std::invalid_argument("QpSolver: reduced Hessian not positive definite");
    // J0 = L^{-T}: basis for the dual active-set updates.
    J0_ = Eigen::MatrixXd::Identity(nv_, nv_);
    llt_.matrixU().solveInPlace(J0_);
    H_ = H;
    ready_ = true;
  }

  // Solves with the cached matrices and fresh vectors.
  QpSolution solve(const Eigen::VectorXd& c, const Eigen::VectorXd& b,
                   const Eigen::VectorXd& d,
                   const std::vector<int>* warm_active = nullptr) {
    if (!ready_) throw std::logic_error("QpSolver: set_matrices not called");
    if (c.size() != n_ || b.size() != m_eq_ || d.size() != m_in_)
      throw std::invalid_argument("QpSolver: vector dimension mismatch");

    QpSolution sol;
    // Particular solution of the equalities and reduced-space vectors.
    Eigen::VectorXd yp;
    if (m_eq_ == 0) {
      yp = Eigen::VectorXd::Zero(n_);
    } else if (structure_) {
      yp = staged_particular(b);
    } else {
      yp = dense_particular(b);
      if (!yp.allFinite() || (A_cache_ * yp + b).lpNorm<Eigen::Infinity>() >
                                 opts_.tol * (1.0 + b.lpNorm<Eigen::Infinity>())) {
        sol.status = QpStatus::infeasible;
        return sol;
      }
    }
    Eigen::VectorXd cred(nv_), dred(m_in_);
    if (m_eq_ == 0) {
      cred = c;
      dred = d;
    } else {
      cred = Z_.transpose() * (c + H_ * yp);
      dred = d;
      for (int r = 0; r < m_in_; ++r) {
        double acc = 0.0;
        for (const auto& [j, gv] : grows_[r]) acc += gv * yp[j];
        dred[r] += acc;
      }
    }

    Eigen::VectorXd v, mu;
    std::vector<int> active;
    const QpStatus st = dual_active_set(cred, dred, warm_active, v, mu, active,
                                        sol.iterations);
    sol.status = st;
    if (st != QpStatus::optimal) return sol;

    sol.dy = (m_eq_ == 0) ? v : Eigen::VectorXd(yp + Z_ * v);
    sol.mu = mu;
    sol.active_set = active;
    std::sort(sol.active_set.begin(), sol.active_set.end());
    // Equality multipliers from full-space stationarity.
    Eigen::VectorXd rhs = -(H_ * sol.dy + c);
    for (int r = 0; r < m_in_; ++r)
      if (mu[r] != 0.0)
        for (const auto& [j, gv] : grows_[r]) rhs[j] -= gv * mu[r];
    if (m_eq_ == 0) {
      sol.lambda.resize(0);
    } else if (structure_) {
      sol.lambda = staged_multipliers(rhs);
    } else {
      sol.lambda = dense_multipliers(rhs);
    }
    sol.kkt_residual = kkt_residual(sol, c, b, d);
    return sol;
  }

  // Full KKT residual (stationarity, primal, dual, complementarity) in inf norm.
  double kkt_residual(const QpSolution& sol, const Eigen::VectorXd& c,
                      const Eigen::VectorXd& b, const Eigen::VectorXd& d) const {
    Eigen::VectorXd stat = H_ * sol.dy + c;
    if (m_eq_ > 0) stat += A_cache_.transpose() * sol.lambda;
    Eigen::VectorXd gv = Eigen::VectorXd::Zero(m_in_);
    for (int r = 0; r < m_in_; ++r) {
      double acc = 0.0;
      for (const auto& [j, w] : grows_[r]) {
        acc += w * sol.dy[j];
        stat[j] += w * sol.mu[r];
      }
      gv[r] = acc + d[r];
    }
    double res = stat.lpNorm<Eigen::Infinity>();
    if (m_eq_ > 0)
      res = std::max(res, (A_cache_ * sol.dy + b).lpNorm<Eigen::Infinity>());
    for (int r = 0; r < m_in_; ++r) {
      res = std::max(res, gv[r]);                      // primal feasibility
      res = std::max(res, -sol.mu[r]);                 // dual feasibility
      res = std::max(res, std::abs(sol.mu[r] * gv[r]));  // complementarity
    }
    return res;
  }

 private:
  // ---- equality elimination: dense QR path ----
  void build_dense(const Eigen::MatrixXd& H, const Eigen::MatrixXd& A) {
    A_cache_ = A;
    qr_.compute(A.transpose());
    rank_ = static_cast<int>(qr_.rank());
    Qfull_ = qr_.householderQ() * Eigen::MatrixXd::Identity(n_, n_);
    Z_ = Qfull_.rightCols(n_ - rank_);
    nv_ = n_ - rank_;
    Hred_ = Z_.transpose() * H * Z_;
  }

  Eigen::VectorXd dense_particular(const Eigen::VectorXd& b) const {
    // A yp = -b with A^T P = Q R: solve R11^T w = (-P^T b).head(rank).
    Eigen::VectorXd pb = -(qr_.colsPermutation().transpose() * b);
    Eigen::VectorXd w = qr_.matrixR()
                            .topLeftCorner(rank_, rank_)
                            .triangularView<Eigen::Upper>()
                            .transpose()
                            .solve(pb.head(rank_));
    return Qfull_.leftCols(rank_) * w;
  }

  Eigen::VectorXd dense_multipliers(const Eigen::VectorXd& rhs) const {
    // A^T lambda = rhs: R11 (P^T lambda).head = Q1^T rhs, free components 0.
    Eigen::VectorXd w = Qfull_.leftCols(rank_).transpose() * rhs;
    Eigen::VectorXd pl = Eigen::VectorXd::Zero(m_eq_);
    pl.head(rank_) = qr_.matrixR()
                         .topLeftCorner(rank_, rank_)
                         .triangularView<Eigen::Upper>()
                         .solve(w);
    return qr_.colsPermutation() * pl;
  }

  // ---- equality elimination: staged (forward sensitivity) path ----
  void build_staged(const Eigen::MatrixXd& H, const Eigen::MatrixXd& A) {
    const StageStructure& s = *structure_;
    A_cache_ = A;
    rank_ = m_eq_;
    Ad_.resize(s.N);
    Bd_.resize(s.N);
    for (int i = 0; i < s.N; ++i) {
      Ad_[i] = -A.block(s.nx * (i + 1), s.x_off(i), s.nx, s.nx);
      Bd_[i] = -A.block(s.nx * (i + 1), s.u_off(i), s.nx, s.nu);
    }
    nv_ = s.nu * s.N + s.n_slack;
    // Z: free variables (u, slack); x rows by forward propagation of the
    // input sensitivities. x_0 rows are zero (pinned by the initial block).
    Z_ = Eigen::MatrixXd::Zero(n_, nv_);
    for (int i = 0; i < s.N; ++i)
      Z_.block(s.u_off(i), s.nu * i, s.nu, s.nu).setIdentity();
    for (int i = 0; i < s.n_slack; ++i) Z_(s.s_off(i), s.nu * s.N + i) = 1.0;
    for (int i = 0; i < s.N; ++i) {
      auto next = Z_.block(s.x_off(i + 1), 0, s.nx, nv_);
      next = Ad_[i] * Z_.block(s.x_off(i), 0, s.nx, nv_);
      next.block(0, s.nu * i, s.nx, s.nu) += Bd_[i];
    }
    // Reduced Hessian using the stage-block-diagonal layout of H.
    Eigen::MatrixXd HZ = Eigen::MatrixXd::Zero(n_, nv_);
    for (int i = 0; i <= s.N; ++i)
      HZ.middleRows(s.x_off(i), s.nx) =
          H.block(s.x_off(i), s.x_off(i), s.nx, s.nx) *
          Z_.middleRows(s.x_off(i), s.nx);
    for (int i = 0; i < s.N; ++i)
      HZ.middleRows(s.u_off(i), s.nu) =
          H.block(s.u_off(i), s.u_off(i), s.nu, s.nu) *
          Z_.middleRows(s.u_off(i), s.nu);
    for (int i = 0; i < s.n_slack; ++i)
      HZ.row(s.s_off(i)) = H(s.s_off(i), s.s_off(i)) * Z_.row(s.s_off(i));
    Hred_ = Z_.transpose() * HZ;
  }

  Eigen::VectorXd staged_particular(const Eigen::VectorXd& b) const {
    const StageStructure& s = *structure_;
    Eigen::VectorXd yp = Eigen::VectorXd::Zero(n_);
    yp.segment(s.x_off(0), s.nx) = -b.head(s.nx);
    for (int i = 0; i < s.N; ++i)
      yp.segment(s.x_off(i + 1), s.nx) =
          Ad_[i] * yp.segment(s.x_off(i), s.nx) - b.segment(s.nx * (i + 1), s.nx);
    return yp;
  }

  Eigen::VectorXd staged_multipliers(const Eigen::VectorXd& rhs) const {
    // Backward recursion on the dynamics multipliers.
    const StageStructure& s = *structure_;
    Eigen::VectorXd lambda(m_eq_);
    Eigen::VectorXd carry = rhs.segment(s.x_off(s.N), s.nx);
    for (int i = s.N - 1; i >= 0; --i) {
      lambda.segment(s.nx * (i + 1), s.nx) = carry;
      carry = rhs.segment(s.x_off(i), s.nx) + Ad_[i].transpose() * carry;
    }
    lambda.head(s.nx) = carry;  // initial-condition block
    return lambda;
  }

  // ---- dual active-set method on the reduced problem ----
  // min 1/2 v' Hred v + c' v  s.t.  Gred v + d <= 0.
  QpStatus dual_active_set(const Eigen::VectorXd& c, const Eigen::VectorXd& d,
                           const std::vector<int>* warm, Eigen::VectorXd& v,
                           Eigen::VectorXd& mu_out, std::vector<int>& active,
                           int& iters) const {
    const double inf = std::numeric_limits<double>::infinity();
    const double scale = d.size() == 0 ? 1.0 : 1.0 + d.cwiseAbs().maxCoeff();
    const double viol_tol = 1e-11 * scale;

    v = -llt_.solve(c);
    Eigen::MatrixXd J = J0_;
    Eigen::MatrixXd R = Eigen::MatrixXd::Zero(nv_, nv_);
    std::vector<int> act;
    std::vector<char> in_act(m_in_, 0);
    Eigen::VectorXd u = Eigen::VectorXd::Zero(nv_ + 1);
    int q = 0;
    iters = 0;

    std::vector<int> warm_queue;
    if (warm) warm_queue.assign(warm->begin(), warm->end());
    std::size_t warm_pos = 0;

    auto violation = [&](int i) { return -(Gred_.row(i).dot(v) + d[i]); };
    // s_i < 0 means violated (internal >= convention: a_i = -Gred row).

    while (true) {
      if (++iters > opts_.max_iter) return QpStatus::max_iter;
      // Pick the next violated constraint: warm-start queue first, then most
      // violated (ties broken toward the lowest index).
      int p = -1;
      double s_p = -viol_tol;
      while (warm_pos < warm_queue.size()) {
        const int i = warm_queue[warm_pos++];
        if (i < 0 || i >= m_in_ || in_act[i]) continue;
        const double s = violation(i);
        if (s < -viol_tol) {
          p = i;
          s_p = s;
          break;
        }
      }
      if (p < 0) {
        for (int i = 0; i < m_in_; ++i) {
          if (in_act[i]) continue;
          const double s = violation(i);
          if (s < s_p) {
            s_p = s;
            p = i;
          }
        }
      }
      if (p < 0) break;  // all satisfied: optimal

      const Eigen::VectorXd np = -Gred_.row(p).transpose();
      double u_plus = 0.0;

      while (true) {
        if (++iters > opts_.max_iter) return QpStatus::max_iter;
        const Eigen::VectorXd dv = J.transpose() * np;
        Eigen::VectorXd z = J.rightCols(nv_ - q) * dv.tail(nv_ - q);
        Eigen::VectorXd r;
        if (q > 0)
          r = R.topLeftCorner(q, q).triangularView<Eigen::Upper>().solve(dv.head(q));

        // Partial (dual) step length: first active multiplier to hit zero.
        double t1 = inf;
        int k_drop = -1;
        for (int k = 0; k < q; ++k) {
          if (r[k] > 0.0) {
            const double val = u[k] / r[k];
            if (val < t1) {
              t1 = val;
              k_drop = k;
            }
          }
        }
        // Full (primal) step length to satisfy constraint p.
        const double ztnp = z.dot(np);
        const double t2 =
            (z.norm() > 1e-12 * std::max(1.0, np.norm())) ? -s_p / ztnp : inf;
        const double t = std::min(t1, t2);
        if (t >= inf) return QpStatus::infeasible;

        if (t2 >= inf) {
          // Step in dual space only; drop the blocking constraint.
          for (int k = 0; k < q; ++k) u[k] -= t * r[k];
          u_plus += t;
          drop_constraint(J, R, act, in_act, u, q, k_drop);
          continue;
        }
        v += t * z;
        for (int k = 0; k < q; ++k) u[k] -= t * r[k];
        u_plus += t;
        if (t == t2) {
          u[q] = u_plus;
          add_constraint(J, R, q, dv);
          act.push_back(p);
          in_act[p] = 1;
          break;
        }
        drop_constraint(J, R, act, in_act, u, q, k_drop);
        s_p = violation(p);
        if (s_p >= -viol_tol) break;  // satisfied after the partial step
      }
    }

    mu_out = Eigen::VectorXd::Zero(m_in_);
    for (int k = 0; k < q; ++k) mu_out[act[k]] = u[k];
    active = act;
    return QpStatus::optimal;
  }

  // Givens coefficients (cc, ss) with cc*a + ss*b = r, -ss*a + cc*b = 0.
  static bool givens(double a, double b, double& cc, double& ss) {
    const double r = std::hypot(a, b);
    if (r == 0.0) {
      cc = 1.0;
      ss = 0.0;
      return false;
    }
    cc = a / r;
    ss = b / r;
    return true;
  }

  // Append the new constraint: zero dv below row q with Givens rotations
  // mirrored onto the columns of J, then store the new R column.
  static void add_constraint(Eigen::MatrixXd& J, Eigen::MatrixXd& R, int& q,
                             Eigen::VectorXd dv) {
    const int nv = static_cast<int>(J.rows());
    for (int i = nv - 1; i > q; --i) {
      double cc, ss;
      if (!givens(dv[i - 1], dv[i], cc, ss)) continue;
      dv[i - 1] = cc * dv[i - 1] + ss * dv[i];
      dv[i] = 0.0;
      const Eigen::VectorXd cl = J.col(i - 1);
      J.col(i - 1) = cc * cl + ss * J.col(i);
      J.col(i) = -ss * cl + cc * J.col(i);
    }
    R.col(q).head(q + 1) = dv.head(q + 1);
    ++q;
  }

  // Remove active constraint k and restore the triangular structure.
  static void drop_constraint(Eigen::MatrixXd& J, Eigen::MatrixXd& R,
                              std::vector<int>& act, std::vector<char>& in_act,
                              Eigen::VectorXd& u, int& q, int k_drop) {
    in_act[act[k_drop]] = 0;
    act.erase(act.begin() + k_drop);
    for (int j = k_drop; j < q - 1; ++j) {
      R.col(j) = R.col(j + 1);
      u[j] = u[j + 1];
    }
    u[q - 1] = 0.0;
    R.col(q - 1).setZero();
    --q;
    for (int j = k_drop; j < q; ++j) {
      if (R(j + 1, j) != 0.0) {
        double cc, ss;
        givens(R(j, j), R(j + 1, j), cc, ss);
        // Rotate rows j, j+1 of R and the matching columns of J.
        for (int col = j; col < q; ++col) {
          const double a = R(j, col), b2 = R(j + 1, col);
          R(j, col) = cc * a + ss * b2;
          R(j + 1, col) = -ss * a + cc * b2;
        }
        R(j + 1, j) = 0.0;
        const Eigen::VectorXd cl = J.col(j);
        J.col(j) = cc * cl + ss * J.col(j + 1);
        J.col(j + 1) = -ss * cl + cc * J.col(j + 1);
      }
    }
  }

  QpOptions opts_;
  bool ready_ = false;
  int n_ = 0, m_eq_ = 0, m_in_ = 0, nv_ = 0, rank_ = 0;
  std::optional<StageStructure> structure_;
  Eigen::MatrixXd H_, A_cache_, Z_, Hred_, Gred_, Qfull_, J0_;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr_;
  Eigen::LLT<Eigen::MatrixXd> llt_;
  std::vector<std::vector<std::pair<int, double>>> grows_;
  std::vector<Eigen::MatrixXd> Ad_, Bd_;
};

// One-shot convenience wrapper over QpSolver.
inline QpSolution solve_qp(const QpData& data,
                           const std::vector<int>* warm_active = nullptr,
                           QpOptions opts = {}) {
  QpSolver solver(opts);
  solver.set_matrices(data.H, data.A, data.G, data.structure);
  return solver.solve(data.c, data.b, data.d, warm_active);
}

}  // namespace racer
