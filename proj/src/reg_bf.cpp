#include "bfsurf/reg_bf.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include <boost/math/distributions/students_t.hpp>

#include "bfsurf/csv.hpp"
#include "bfsurf/errors.hpp"
#include "bfsurf/rng.hpp"
#include "detail/mc_blocks.hpp"

namespace bfsurf::reg {

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

// log of the α-integrated likelihood prefactor (2π)^{-(n-1)/2} n^{-1/2}.
double log_alpha_prefactor(std::size_t n) {
  const double nd = static_cast<double>(n);
  return -0.5 * (nd - 1.0) * kLog2Pi - 0.5 * std::log(nd);
}

double log_gamma_prior_const(double a, double b) { return a * std::log(b) - std::lgamma(a); }

}  // namespace

RegressionData::RegressionData(std::vector<double> x, std::vector<double> y)
    : x_(std::move(x)), y_(std::move(y)) {
  if (x_.size() != y_.size()) throw Error(Errc::invalid_argument, "x and y differ in length", "y");
  if (x_.size() < 2) throw Error(Errc::insufficient_sample, "insufficient sample", "n");
  for (std::size_t i = 0; i < x_.size(); ++i)
    if (!std::isfinite(x_[i]) || !std::isfinite(y_[i]))
      throw Error(Errc::invalid_argument, "non-finite observation", std::isfinite(x_[i]) ? "y" : "x");

  const double nd = static_cast<double>(n());
  for (std::size_t i = 0; i < n(); ++i) {
    x_mean_ += x_[i];
    y_mean_ += y_[i];
  }
  x_mean_ /= nd;
  y_mean_ /= nd;
  w_.resize(n());
  z_.resize(n());
  for (std::size_t i = 0; i < n(); ++i) {
    w_[i] = x_[i] - x_mean_;
    z_[i] = y_[i] - y_mean_;
    sww_ += w_[i] * w_[i];
    szz_ += z_[i] * z_[i];
    szw_ += z_[i] * w_[i];
  }
}

double RegressionData::ls_slope() const {
  if (sww_ <= 0.0) throw Error(Errc::degenerate_data, "predictor has zero variance");
  return szw_ / sww_;
}

double RegressionData::slope_p_value() const {
  if (n() < 3) throw Error(Errc::insufficient_sample, "insufficient sample", "n");
  const double slope = ls_slope();
  const double rss = std::max(szz_ - szw_ * szw_ / sww_, 0.0);
  const double df = static_cast<double>(n()) - 2.0;
  const double se = std::sqrt(rss / df / sww_);
  if (se == 0.0) return slope == 0.0 ? 1.0 : 0.0;
  boost::math::students_t dist(df);
  return 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(slope / se)));
}

void RegressionHypers::validate() const {
  if (!std::isfinite(mu)) throw Error(Errc::invalid_argument, "mu must be finite", "mu");
  if (!(phi > 0.0) || !std::isfinite(phi)) throw Error(Errc::invalid_argument, "phi must be positive", "phi");
  if (!(a > 0.0) || !std::isfinite(a)) throw Error(Errc::invalid_argument, "a must be positive", "a");
  if (!(b > 0.0) || !std::isfinite(b)) throw Error(Errc::invalid_argument, "b must be positive", "b");
}

std::string_view to_string(BfMethod m) {
  switch (m) {
    case BfMethod::closed_quadrature: return "closed_quadrature";
    case BfMethod::zellner_siow: return "zellner_siow";
    case BfMethod::bic: return "bic";
    case BfMethod::fractional: return "fractional";
    case BfMethod::monte_carlo: return "monte_carlo";
  }
  return "unknown";
}

RegressionData simulate_regression(std::size_t n, double alpha, double beta, double sigma2,
                                   std::uint64_t seed) {
  if (n < 3) throw Error(Errc::insufficient_sample, "insufficient sample", "n");
  if (!(sigma2 >= 0.0)) throw Error(Errc::invalid_argument, "sigma2 must be non-negative", "sigma2");
  CounterRng rng(stream_key(seed, 0x5EED));
  const double sd = std::sqrt(sigma2);
  std::vector<double> x(n), y(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = rng.uniform();
  for (std::size_t i = 0; i < n; ++i) {
    const double eps = sd > 0.0 ? sd * rng.normal() : 0.0;
    y[i] = alpha + beta * x[i] + eps;
  }
  return RegressionData(std::move(x), std::move(y));
}

double log_marginal_m2(const RegressionData& data, const RegressionHypers& hypers) {
  hypers.validate();
  const double shape = 0.5 * (static_cast<double>(data.n()) - 1.0) + hypers.a;
  return log_alpha_prefactor(data.n()) + log_gamma_prior_const(hypers.a, hypers.b) +
         std::lgamma(shape) - shape * std::log(hypers.b + 0.5 * data.sum_zz());
}

double m1_log_integrand(const RegressionData& data, const RegressionHypers& h, double gamma) {
  if (gamma <= 0.0) return -std::numeric_limits<double>::infinity();
  const double sww = data.sum_ww(), szz = data.sum_zz(), szw = data.sum_zw();
  const double d = h.phi + gamma * sww;
  // -½(φμ² + γΣz²) + ½(φμ + γΣzw)²/D rewritten without the φμ² cancellation.
  const double quad = szz + (h.phi * h.mu * (h.mu * sww - 2.0 * szw) - gamma * szw * szw) / d;
  const double shape = 0.5 * (static_cast<double>(data.n()) - 1.0) + h.a;
  return 0.5 * std::log(h.phi) + (shape - 1.0) * std::log(gamma) - 0.5 * std::log(d) -
         h.b * gamma - 0.5 * gamma * quad;
}

double log_marginal_m1(const RegressionData& data, const RegressionHypers& hypers,
                       const numerics::QuadratureSpec& mesh) {
  hypers.validate();
  const double integral = numerics::log_trapezoid(
      [&](double gamma) { return m1_log_integrand(data, hypers, gamma); }, mesh);
  return log_alpha_prefactor(data.n()) + log_gamma_prior_const(hypers.a, hypers.b) + integral;
}

LogBf log_bf_12(const RegressionData& data, const RegressionHypers& hypers) {
  LogBf out;
  out.value = log_marginal_m1(data, hypers) - log_marginal_m2(data, hypers);
  out.method = BfMethod::closed_quadrature;
  return out;
}

// ---------------------------------------------------------------------------
// Monte Carlo oracle

namespace {

struct RegDraws {
  double szz, szw, sww, half_nm1, prefactor;
  RegressionHypers h;
  Model model;
  std::uint64_t seed;

  double log_lik(std::size_t i) const {
    CounterRng rng(stream_key(seed, model == Model::M1 ? 1 : 2, i));
    const double gamma = rng.gamma(h.a, h.b);
    double rss = szz;
    if (model == Model::M1) {
      const double beta = h.mu + rng.normal() / std::sqrt(h.phi);
      rss = szz - 2.0 * beta * szw + beta * beta * sww;
    }
    return prefactor + half_nm1 * std::log(gamma) - 0.5 * gamma * rss;
  }
};

RegDraws make_draws(const RegressionData& data, const RegressionHypers& hypers, Model model,
                    std::size_t n_draws, std::uint64_t seed) {
  hypers.validate();
  if (n_draws < 1000) throw Error(Errc::invalid_argument, "n_draws must be at least 1000", "n_draws");
  return {data.sum_zz(), data.sum_zw(), data.sum_ww(),
          0.5 * (static_cast<double>(data.n()) - 1.0), log_alpha_prefactor(data.n()),
          hypers, model, seed};
}

}  // namespace

McEstimate mc_oracle_log_marginal(const RegressionData& data, const RegressionHypers& hypers,
                                  Model model, std::size_t n_draws, std::uint64_t seed) {
  if (n_draws < 10000) throw Error(Errc::invalid_argument, "oracle needs at least 1e4 draws", "n_draws");
  return detail::mc_estimate_parallel(make_draws(data, hypers, model, n_draws, seed), n_draws);
}

LogBf noisy_log_bf(const RegressionData& data, const RegressionHypers& hypers, std::size_t n_draws,
                   std::uint64_t seed) {
  const auto m1 = detail::mc_estimate_parallel(make_draws(data, hypers, Model::M1, n_draws, stream_key(seed, 11)), n_draws);
  const auto m2 = detail::mc_estimate_parallel(make_draws(data, hypers, Model::M2, n_draws, stream_key(seed, 22)), n_draws);
  LogBf out;
  out.value = m1.log_marginal - m2.log_marginal;
  out.std_err = std::hypot(m1.std_err, m2.std_err);
  out.method = BfMethod::monte_carlo;
  return out;
}

// ---------------------------------------------------------------------------
// Automatic procedures

LogBf log_bf_zellner_siow(const RegressionData& data) {
  const double sww = data.sum_ww(), szz = data.sum_zz(), szw = data.sum_zw();
  if (!(sww > 0.0)) throw Error(Errc::degenerate_data, "predictor has zero variance", "x");
  const double r2 = szz > 0.0 ? std::min(szw * szw / (sww * szz), 1.0) : 0.0;
  if (r2 > 1.0 - 1e-14) throw Error(Errc::degenerate_data, "perfect fit: Zellner-Siow integral diverges");
  const double nd = static_cast<double>(data.n());

  // BF(g) = (1+g)^{(n-2)/2} (1 + g(1-R²))^{-(n-1)/2}, g ~ IG(1/2, n/2), over u = log g.
  const double ig_const = 0.5 * std::log(0.5 * nd) - std::lgamma(0.5);
  auto f = [&](double u) {
    const double g = std::exp(u);
    return 0.5 * (nd - 2.0) * std::log1p(g) - 0.5 * (nd - 1.0) * std::log1p(g * (1.0 - r2)) +
           ig_const - 1.5 * u - 0.5 * nd / g + u;
  };

  LogBf out;
  out.method = BfMethod::zellner_siow;
  try {
    out.value = numerics::laplace_log_integral(f, std::log(nd), {-30.0, 30.0});
  } catch (const Error& e) {
    if (e.code() != Errc::laplace_failure) throw;
    out.value = numerics::log_trapezoid(f, {-15.0, 15.0, 2001, numerics::Transform::identity});
    out.fallback = true;
  }
  return out;
}

LogBf log_bf_bic(const RegressionData& data) {
  if (data.n() < 3) throw Error(Errc::insufficient_sample, "insufficient sample", "n");
  const double nd = static_cast<double>(data.n());
  const double rss2 = data.sum_zz();
  const double rss1 = data.sum_ww() > 0.0 ? std::max(rss2 - data.sum_zw() * data.sum_zw() / data.sum_ww(), 0.0)
                                          : rss2;
  double loglik_diff = 0.0;  // loglik_1 - loglik_2 = -n/2 log(RSS1/RSS2)
  if (rss2 > 0.0) {
    if (rss1 <= 0.0) throw Error(Errc::degenerate_data, "perfect fit: BIC log-likelihood unbounded");
    loglik_diff = -0.5 * nd * std::log(rss1 / rss2);
  }
  // BIC_k = -2 loglik_k + p_k log n with p_1 = 3, p_2 = 2.
  LogBf out;
  out.value = loglik_diff - 0.5 * std::log(nd);
  out.method = BfMethod::bic;
  return out;
}

namespace {

// log of the b-powered likelihood integrated against p(coef, γ) ∝ 1/γ, with
// the det(XᵀX) factor omitted (it cancels within each q_k).
double log_fractional_marginal(double n, double p, double rss, double frac) {
  const double shape = 0.5 * (n * frac - p);
  return -shape * std::log(2.0 * std::numbers::pi) - 0.5 * p * std::log(frac) + std::lgamma(shape) -
         shape * std::log(0.5 * frac * rss);
}

}  // namespace

LogBf log_bf_fractional(const RegressionData& data, std::size_t m) {
  if (m < 3) throw Error(Errc::insufficient_training_fraction, "insufficient training fraction", "m");
  if (m > data.n()) throw Error(Errc::invalid_argument, "training size exceeds sample size", "m");
  if (!(data.sum_ww() > 0.0)) throw Error(Errc::degenerate_data, "predictor has zero variance", "x");
  LogBf out;
  out.method = BfMethod::fractional;
  if (m == data.n()) return out;  // b = 1: each q_k is exactly 1

  const double nd = static_cast<double>(data.n());
  const double frac = static_cast<double>(m) / nd;
  const double rss2 = data.sum_zz();
  const double rss1 = rss2 - data.sum_zw() * data.sum_zw() / data.sum_ww();
  if (!(rss1 > 0.0)) throw Error(Errc::degenerate_data, "perfect fit: fractional marginal undefined");
  const double log_q1 = log_fractional_marginal(nd, 2.0, rss1, 1.0) - log_fractional_marginal(nd, 2.0, rss1, frac);
  const double log_q2 = log_fractional_marginal(nd, 1.0, rss2, 1.0) - log_fractional_marginal(nd, 1.0, rss2, frac);
  out.value = log_q1 - log_q2;
  return out;
}

std::string to_csv(const RegressionData& data) {
  std::string out = "x,y\n";
  for (std::size_t i = 0; i < data.n(); ++i)
    out += csv::format(data.x()[i]) + "," + csv::format(data.y()[i]) + "\n";
  return out;
}

RegressionData regression_from_csv(std::string_view text) {
  const auto t = csv::parse(text);
  const int cx = t.column("x"), cy = t.column("y");
  if (cx < 0 || cy < 0) throw Error(Errc::parse_error, "regression CSV needs header x,y");
  std::vector<double> x, y;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    x.push_back(csv::to_double(t.rows[r][static_cast<std::size_t>(cx)], t.line_numbers[r], "x"));
    y.push_back(csv::to_double(t.rows[r][static_cast<std::size_t>(cy)], t.line_numbers[r], "y"));
  }
  return RegressionData(std::move(x), std::move(y));
}

}  // namespace bfsurf::reg

namespace bfsurf::reference {

reg::McEstimate mc_oracle_log_marginal(const reg::RegressionData& data,
                                       const reg::RegressionHypers& hypers, reg::Model model,
                                       std::size_t n_draws, std::uint64_t seed) {
  if (n_draws < 10000) throw Error(Errc::invalid_argument, "oracle needs at least 1e4 draws", "n_draws");
  return detail::mc_estimate_serial(reg::make_draws(data, hypers, model, n_draws, seed), n_draws);
}

}  // namespace bfsurf::reference
