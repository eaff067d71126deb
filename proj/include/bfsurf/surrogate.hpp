#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "bfsurf/errors.hpp"

namespace bfsurf::surrogate {

enum class KernelFamily { squared_exponential, matern_5_2 };

std::string_view to_string(KernelFamily f);
KernelFamily kernel_from_string(std::string_view s);

struct KernelSpec {
  KernelFamily family = KernelFamily::matern_5_2;
  Eigen::VectorXd lengthscales;  // scaled input units
  double signal_var = 1.0;

  void validate() const;
};

double kernel(const KernelSpec& k, const Eigen::Ref<const Eigen::VectorXd>& a,
              const Eigen::Ref<const Eigen::VectorXd>& b);
Eigen::MatrixXd cross_cov(const KernelSpec& k, const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

/// Observations at scaled inputs, with exact-duplicate rows grouped as
/// replicates (first-appearance order).
class TrainingSet {
 public:
  TrainingSet() = default;
  TrainingSet(Eigen::MatrixXd x, Eigen::VectorXd y);

  const Eigen::MatrixXd& x() const noexcept { return x_; }
  const Eigen::VectorXd& y() const noexcept { return y_; }
  std::size_t size() const noexcept { return static_cast<std::size_t>(y_.size()); }
  std::size_t dim() const noexcept { return static_cast<std::size_t>(x_.cols()); }

  const Eigen::MatrixXd& unique_x() const noexcept { return ux_; }
  const std::vector<int>& counts() const noexcept { return counts_; }
  const Eigen::VectorXd& means() const noexcept { return means_; }
  /// Within-location sample variance (n_i - 1 denominator; 0 when n_i = 1).
  const Eigen::VectorXd& variances() const noexcept { return vars_; }
  /// Observation row -> unique-location index.
  const std::vector<int>& location() const noexcept { return loc_; }

  TrainingSet subset(const std::vector<std::size_t>& rows) const;

 private:
  Eigen::MatrixXd x_;
  Eigen::VectorXd y_;
  Eigen::MatrixXd ux_;
  std::vector<int> counts_;
  Eigen::VectorXd means_, vars_;
  std::vector<int> loc_;
};

/// Hyperparameters on the optimizer's log scale.
struct GpParams {
  KernelFamily family = KernelFamily::matern_5_2;
  Eigen::VectorXd log_lengthscales;
  double log_signal_var = 0.0;
  double log_nugget = std::log(1e-8);
};

/// Constant-mean GP log marginal likelihood with the mean profiled out by GLS.
/// Covariance: signal_var·R + diag(nugget + known_noise). When `grad` is
/// given it receives d/d(log ℓ_1..d, log signal_var, log nugget).
double gp_log_likelihood(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const Eigen::VectorXd& known_noise,
                         const GpParams& p, Eigen::VectorXd* grad = nullptr);

/// Fitted constant-mean GP over standardized outputs. Enough state is kept to
/// rebuild the predictor from JSON.
struct GpCore {
  KernelSpec kernel;      // standardized output units
  double mean = 0.0;      // GLS constant, standardized units
  double nugget = 1e-8;   // homoskedastic noise, standardized units
  double y_center = 0.0;  // standardization
  double y_scale = 1.0;
  Eigen::MatrixXd x;
  Eigen::VectorXd y;      // standardized targets
  Eigen::VectorXd known;  // extra per-point noise, standardized units
  double log_lik = 0.0;

  // derived by rebuild()
  Eigen::LLT<Eigen::MatrixXd> llt;
  Eigen::VectorXd alpha;

  void rebuild();
  /// Mean and epistemic variance in raw output units.
  void predict(const Eigen::MatrixXd& xnew, Eigen::VectorXd& mean, Eigen::VectorXd& var) const;
  Eigen::MatrixXd covariance() const;
};

struct FitDiagnostics {
  bool converged = false;
  int starts_converged = 0;
  int best_start = 0;
  int iterations = 0;
  double grad_norm = 0.0;
  std::vector<double> start_log_lik;  // at each initialization
  std::vector<double> final_log_lik;  // after each start's optimization
  /// fit_hetgp fell back to a homoskedastic fit with estimated nugget.
  bool fallback = false;
};

struct HetGpFit {
  GpCore mean_gp;
  /// Smoother of the log noise variance (raw units); absent when homoskedastic.
  std::optional<GpCore> noise_gp;
  /// Per-unique-location single-observation noise variance, raw units.
  Eigen::VectorXd noise;
  std::vector<int> counts;
  FitDiagnostics diagnostics;

  bool heteroskedastic() const { return noise_gp.has_value(); }
  /// Noise variance of one observation at x (raw units).
  Eigen::VectorXd noise_at(const Eigen::MatrixXd& xnew) const;
  const KernelSpec& kernel() const { return mean_gp.kernel; }
};

class FitFailed : public Error {
 public:
  FitFailed(const std::string& what, HetGpFit best)
      : Error(Errc::fit_failed, what), best_(std::move(best)) {}
  const HetGpFit& best_effort() const noexcept { return best_; }

 private:
  HetGpFit best_;
};

struct Nugget {
  bool estimate = true;
  double value = 1e-8;  // standardized units when fixed
  static Nugget fixed(double v) { return {false, v}; }
  static Nugget estimated() { return {true, 1e-8}; }
};

struct FitOptions {
  KernelFamily family = KernelFamily::matern_5_2;
  int starts = 5;
  int max_iter = 500;
  double grad_tol = 1e-5;
  std::uint64_t seed = 1;
};

inline constexpr double kLengthscaleMin = 1e-2, kLengthscaleMax = 10.0;
inline constexpr double kSignalVarMin = 1e-4, kSignalVarMax = 1e2;
inline constexpr double kNoiseFloor = 1e-8, kNuggetMax = 10.0;

HetGpFit fit_gp(const TrainingSet& train, Nugget nugget, const FitOptions& opt = {});
HetGpFit fit_hetgp(const TrainingSet& train, const FitOptions& opt = {});

struct Prediction {
  Eigen::VectorXd mean;
  Eigen::VectorXd var_mean;  // epistemic
  Eigen::VectorXd var_obs;   // epistemic + noise
  std::vector<bool> extrapolated;

  std::size_t size() const { return static_cast<std::size_t>(mean.size()); }
  /// Two-sided normal interval at the given level from var_obs (or var_mean).
  std::pair<Eigen::VectorXd, Eigen::VectorXd> interval(double level, bool observation = true) const;
};

Prediction predict(const HetGpFit& fit, const Eigen::MatrixXd& xnew);

/// Fraction of holdout observations inside the level interval from var_obs.
double coverage(const HetGpFit& fit, const TrainingSet& holdout, double level = 0.95);

std::string to_json(const HetGpFit& fit);
HetGpFit fit_from_json(std::string_view text);

/// CSV `x…,mean,sd_mean,sd_obs`; column names default to x1..xd.
std::string predictions_to_csv(const Eigen::MatrixXd& x, const Prediction& p,
                               const std::vector<std::string>& names = {});

}  // namespace bfsurf::surrogate
