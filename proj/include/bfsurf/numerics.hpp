#pragma once

#include <functional>
#include <span>

#include <Eigen/Dense>

namespace bfsurf::numerics {

/// Maps a point to the natural log of a non-negative integrand. Must return a
/// finite value or -infinity, never NaN.
using LogIntegrand = std::function<double(double)>;

enum class Transform { identity, log };

struct QuadratureSpec {
  double lower = -20.0;
  double upper = 15.0;
  int n_nodes = 2001;
  Transform transform = Transform::log;

  void validate() const;
};

/// Default mesh for integrals over a precision parameter (log scale).
inline constexpr QuadratureSpec kPrecisionMesh{-20.0, 15.0, 2001, Transform::log};

double log_sum_exp(std::span<const double> values);

/// log of the trapezoid-rule integral of exp(f). With Transform::log the mesh
/// bounds are in u = log(t), f is still called with t = e^u, and the Jacobian
/// e^u is folded into the integrand.
double log_trapezoid(const LogIntegrand& f, const QuadratureSpec& spec);

struct Interval {
  double lower;
  double upper;
};

/// Laplace approximation to log of the integral of exp(f) over `domain`.
/// The mode is bracketed outward from `init`, refined with Brent, and the
/// curvature taken by central differences. Throws Errc::laplace_failure when
/// the mode sits on the domain boundary or curvature is non-negative.
double laplace_log_integral(const LogIntegrand& f, double init, Interval domain);

/// Cholesky factor of an SPD matrix, with the diagonal jitter that was needed.
class SpdFactor {
 public:
  explicit SpdFactor(const Eigen::MatrixXd& a);

  double logdet() const noexcept { return logdet_; }
  double jitter() const noexcept { return jitter_; }
  Eigen::Index size() const noexcept { return llt_.rows(); }
  Eigen::MatrixXd solve(const Eigen::MatrixXd& b) const { return llt_.solve(b); }
  Eigen::VectorXd solve(const Eigen::VectorXd& b) const { return llt_.solve(b); }
  Eigen::MatrixXd inverse() const;
  /// Lower-triangular factor L with L L^T = A + jitter I.
  Eigen::MatrixXd lower() const { return llt_.matrixL(); }
  /// Solves L v = b.
  Eigen::VectorXd solve_lower(const Eigen::VectorXd& b) const;

 private:
  Eigen::LLT<Eigen::MatrixXd> llt_;
  double logdet_ = 0.0;
  double jitter_ = 0.0;
};

/// Monte Carlo estimate of a log marginal likelihood and its delta-method
/// standard error.
struct McEstimate {
  double log_marginal;
  double std_err;
};

struct CholSolve {
  double logdet;
  Eigen::MatrixXd x;
};

/// log det(A) and A^{-1} B through a Cholesky factorization. Jitter escalates
/// 1e-10 -> 1e-6 times the mean diagonal before giving up with
/// Errc::not_positive_definite.
CholSolve chol_logdet_solve(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

}  // namespace bfsurf::numerics
