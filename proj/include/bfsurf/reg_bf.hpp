#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "bfsurf/numerics.hpp"

namespace bfsurf::reg {

/// Paired predictor/outcome data with the centered forms w = x - x̄,
/// z = y - ȳ and their cross sums. Only the centered sums enter any of the
/// Bayes factors, because the flat intercept prior integrates out the mean.
class RegressionData {
 public:
  RegressionData(std::vector<double> x, std::vector<double> y);

  std::size_t n() const noexcept { return x_.size(); }
  const std::vector<double>& x() const noexcept { return x_; }
  const std::vector<double>& y() const noexcept { return y_; }
  const std::vector<double>& w() const noexcept { return w_; }
  const std::vector<double>& z() const noexcept { return z_; }
  double x_mean() const noexcept { return x_mean_; }
  double y_mean() const noexcept { return y_mean_; }
  double sum_ww() const noexcept { return sww_; }
  double sum_zz() const noexcept { return szz_; }
  double sum_zw() const noexcept { return szw_; }

  /// Least-squares slope Σzw/Σww.
  double ls_slope() const;
  /// Two-sided p-value of the least-squares slope t statistic (n - 2 df).
  double slope_p_value() const;

 private:
  std::vector<double> x_, y_, w_, z_;
  double x_mean_ = 0.0, y_mean_ = 0.0;
  double sww_ = 0.0, szz_ = 0.0, szw_ = 0.0;
};

/// Prior hyperparameters: β|M1 ~ N(mu, precision phi), γ ~ Gamma(a, rate b).
struct RegressionHypers {
  double mu = 0.0;
  double phi = 1.0;
  double a = 1.0;
  double b = 1.0;

  void validate() const;
};

enum class BfMethod { closed_quadrature, zellner_siow, bic, fractional, monte_carlo };

std::string_view to_string(BfMethod m);

/// Natural-log Bayes factor of M1 (slope) over M2 (no slope).
struct LogBf {
  double value = 0.0;
  double std_err = 0.0;
  BfMethod method = BfMethod::closed_quadrature;
  /// Set when Zellner-Siow fell back from Laplace to trapezoid quadrature.
  bool fallback = false;
};

enum class Model { M1, M2 };

RegressionData simulate_regression(std::size_t n, double alpha, double beta, double sigma2,
                                   std::uint64_t seed);

// Both marginals drop the improper-intercept constant (c = 1); it cancels in
// every Bayes factor.
double log_marginal_m2(const RegressionData& data, const RegressionHypers& hypers);
double log_marginal_m1(const RegressionData& data, const RegressionHypers& hypers,
                       const numerics::QuadratureSpec& mesh = numerics::kPrecisionMesh);

/// log of the M1 integrand over γ (everything under the integral sign).
double m1_log_integrand(const RegressionData& data, const RegressionHypers& hypers, double gamma);

LogBf log_bf_12(const RegressionData& data, const RegressionHypers& hypers);

using numerics::McEstimate;

/// Prior-sampling Monte Carlo estimate of a marginal likelihood (c = 1).
/// Draws are blocked and each draw has its own counter stream, so the OpenMP
/// result is bit-identical to reference::mc_oracle_log_marginal.
McEstimate mc_oracle_log_marginal(const RegressionData& data, const RegressionHypers& hypers,
                                  Model model, std::size_t n_draws, std::uint64_t seed);

LogBf log_bf_zellner_siow(const RegressionData& data);
LogBf log_bf_bic(const RegressionData& data);
LogBf log_bf_fractional(const RegressionData& data, std::size_t m = 3);

/// Monte Carlo log BF: independent oracle estimates for M1 and M2.
LogBf noisy_log_bf(const RegressionData& data, const RegressionHypers& hypers,
                   std::size_t n_draws, std::uint64_t seed);

std::string to_csv(const RegressionData& data);
RegressionData regression_from_csv(std::string_view text);

}  // namespace bfsurf::reg

namespace bfsurf::reference {

/// Single-threaded reference for reg::mc_oracle_log_marginal.
reg::McEstimate mc_oracle_log_marginal(const reg::RegressionData& data,
                                       const reg::RegressionHypers& hypers, reg::Model model,
                                       std::size_t n_draws, std::uint64_t seed);

}  // namespace bfsurf::reference
