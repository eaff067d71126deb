#include "bfsurf/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include <boost/math/tools/minima.hpp>

#include "bfsurf/errors.hpp"

namespace bfsurf::numerics {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
}

void QuadratureSpec::validate() const {
  if (!(upper > lower)) throw Error(Errc::invalid_argument, "quadrature upper must exceed lower", "upper");
  if (n_nodes < 2) throw Error(Errc::invalid_argument, "quadrature needs at least 2 nodes", "n_nodes");
}

double log_sum_exp(std::span<const double> values) {
  double mx = kNegInf;
  for (double v : values) mx = std::max(mx, v);
  if (mx == kNegInf) return kNegInf;
  double s = 0.0;
  for (double v : values) s += std::exp(v - mx);
  return mx + std::log(s);
}

double log_trapezoid(const LogIntegrand& f, const QuadratureSpec& spec) {
  spec.validate();
  const int n = spec.n_nodes;
  const double h = (spec.upper - spec.lower) / (n - 1);
  std::vector<double> terms(static_cast<std::size_t>(n));
  bool any_finite = false;
  for (int i = 0; i < n; ++i) {
    const double t = (i == n - 1) ? spec.upper : spec.lower + i * h;
    const bool log_scale = spec.transform == Transform::log;
    double v = f(log_scale ? std::exp(t) : t);
    if (std::isnan(v) || v == std::numeric_limits<double>::infinity())
      throw Error(Errc::invalid_integrand, "invalid integrand");
    if (log_scale) v += t;
    if (i == 0 || i == n - 1) v -= std::numbers::ln2;
    any_finite = any_finite || std::isfinite(v);
    terms[static_cast<std::size_t>(i)] = v;
  }
  if (!any_finite) throw Error(Errc::integrand_underflow, "integrand underflow");
  return std::log(h) + log_sum_exp(terms);
}

double laplace_log_integral(const LogIntegrand& f, double init, Interval domain) {
  if (!(domain.upper > domain.lower) || init <= domain.lower || init >= domain.upper)
    throw Error(Errc::invalid_argument, "laplace init must lie inside the domain", "init");

  auto fail = [](const char* why) { return Error(Errc::laplace_failure, std::string("laplace failure: ") + why); };
  auto eval = [&](double t) {
    const double v = f(t);
    if (std::isnan(v)) throw fail("integrand is NaN");
    return v;
  };

  // Expand a bracket [lo, hi] around init until f drops on both sides.
  const double width = domain.upper - domain.lower;
  double step = std::max(1e-3 * width, 1e-6);
  double lo = init, hi = init;
  double f_init = eval(init);
  double f_lo = f_init;
  while (true) {
    const double cand = std::max(domain.lower, lo - step);
    const double fc = eval(cand);
    lo = cand;
    if (fc < f_lo) break;
    f_lo = fc;
    if (cand == domain.lower) break;
    step *= 2.0;
  }
  step = std::max(1e-3 * width, 1e-6);
  double f_hi = f_init;
  while (true) {
    const double cand = std::min(domain.upper, hi + step);
    const double fc = eval(cand);
    hi = cand;
    if (fc < f_hi) break;
    f_hi = fc;
    if (cand == domain.upper) break;
    step *= 2.0;
  }

  constexpr int kBits = std::numeric_limits<double>::digits / 2 + 4;
  std::uintmax_t max_iter = 500;
  const auto [t_star, neg_f] = boost::math::tools::brent_find_minima(
      [&](double t) { return -eval(t); }, lo, hi, kBits, max_iter);
  if (max_iter >= 500) throw fail("mode search did not converge");

  const double edge_tol = 1e-6 * std::max(1.0, width);
  if (t_star - domain.lower < edge_tol || domain.upper - t_star < edge_tol)
    throw fail("mode on domain boundary");

  // Brent only pins the mode to ~sqrt(eps); Newton on the difference quotients
  // takes it to rounding level so the curvature estimate is reproducible.
  double t = t_star;
  double f0 = -neg_f;
  const double h = 1e-3 * std::max(1.0, std::abs(t_star));
  for (int it = 0; it < 2; ++it) {
    const double fp = eval(t + h), fm = eval(t - h);
    const double d1 = (fp - fm) / (2.0 * h);
    const double d2 = (fp - 2.0 * f0 + fm) / (h * h);
    if (!(d2 < 0.0)) break;
    const double next = t - d1 / d2;
    if (!(std::abs(next - t) < h) || next <= domain.lower || next >= domain.upper) break;
    t = next;
    f0 = eval(next);
  }
  const double curv = (eval(t + h) - 2.0 * f0 + eval(t - h)) / (h * h);
  if (!(curv < 0.0) || !std::isfinite(curv)) throw fail("non-negative curvature at mode");
  return f0 + 0.5 * std::log(2.0 * std::numbers::pi) - 0.5 * std::log(-curv);
}

SpdFactor::SpdFactor(const Eigen::MatrixXd& a) {
  if (a.rows() != a.cols()) throw Error(Errc::invalid_argument, "matrix must be square");
  const Eigen::Index n = a.rows();
  const double mean_diag = n > 0 ? std::max(a.diagonal().mean(), 0.0) : 0.0;
  const double ladder[] = {0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6};
  for (double rel : ladder) {
    const double jit = rel * (mean_diag > 0.0 ? mean_diag : 1.0);
    if (jit == 0.0) {
      llt_.compute(a);
    } else {
      Eigen::MatrixXd aj = a;
      aj.diagonal().array() += jit;
      llt_.compute(aj);
    }
    if (llt_.info() != Eigen::Success) continue;
    const auto diag = llt_.matrixLLT().diagonal();
    if ((diag.array() > 0.0).all() && diag.allFinite()) {
      jitter_ = jit;
      logdet_ = 2.0 * diag.array().log().sum();
      return;
    }
  }
  throw Error(Errc::not_positive_definite, "not positive definite");
}

Eigen::MatrixXd SpdFactor::inverse() const {
  return llt_.solve(Eigen::MatrixXd::Identity(size(), size()));
}

Eigen::VectorXd SpdFactor::solve_lower(const Eigen::VectorXd& b) const {
  return llt_.matrixL().solve(b);
}

CholSolve chol_logdet_solve(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (b.rows() != a.rows()) throw Error(Errc::invalid_argument, "right-hand side has wrong row count", "B");
  SpdFactor fac(a);
  return {fac.logdet(), fac.solve(b)};
}

}  // namespace bfsurf::numerics
