#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "bfsurf/numerics.hpp"
#include "bfsurf/reg_bf.hpp"

namespace bfsurf::hlm {

struct HlmGroup {
  std::string id;
  std::vector<double> y;
  std::vector<double> ses;  // centered within the group by HlmDataset
};

/// Per-group sufficient statistics for the design X_j = [1, ses_j].
/// Centering makes X_jᵀX_j diagonal: diag(n_j, Σses²).
struct GroupStats {
  double n = 0.0;
  double sum_y = 0.0;
  double sum_yy = 0.0;
  double sum_ss = 0.0;  // Σ ses²
  double sum_sy = 0.0;  // Σ ses·y
  bool constant_ses = false;
};

/// Grouped outcome/predictor data (students within schools).
class HlmDataset {
 public:
  explicit HlmDataset(std::vector<HlmGroup> groups);

  std::size_t m() const noexcept { return groups_.size(); }
  std::size_t total() const noexcept { return total_; }
  const std::vector<HlmGroup>& groups() const noexcept { return groups_; }
  const std::vector<GroupStats>& stats() const noexcept { return stats_; }

 private:
  std::vector<HlmGroup> groups_;
  std::vector<GroupStats> stats_;
  std::size_t total_ = 0;
};

/// HLM hyperparameters. Always stored in the 2-D (intercept, slope) form;
/// the means-only model reads the intercept block mu0[0], lambda0(0,0).
struct HlmHypers {
  double g = 1.0;
  Eigen::Vector2d mu0 = Eigen::Vector2d::Zero();
  Eigen::Matrix2d lambda0 = Eigen::Matrix2d::Identity();
  double nu0 = 1.0;
  double sigma0_sq = 1.0;

  void validate() const;
};

enum class HlmModel { slopes_and_intercepts, means_only };

inline int dimension(HlmModel m) { return m == HlmModel::slopes_and_intercepts ? 2 : 1; }

HlmDataset load_hlm_csv(std::string_view text);
HlmDataset load_hlm_csv_file(const std::filesystem::path& path);
std::string to_csv(const HlmDataset& data);

/// Seeded synthetic data shaped like the classic school math-score set:
/// m groups of 10 to 30 students, ses ~ N(0, 0.8²), group coefficients
/// drawn from the g-prior around theta.
struct SyntheticHlmSpec {
  std::size_t m = 100;
  double theta0 = 47.76;
  double theta1 = 2.37;
  double g = 7.44;
  double sigma_sq = 82.94;
  /// Zero the slope part of every group coefficient (data from the means model).
  bool means_only = false;
};
HlmDataset synthetic_hlm(std::uint64_t seed, const SyntheticHlmSpec& spec = {});

double log_marginal_hlm(const HlmDataset& data, HlmModel model, const HlmHypers& hypers,
                        const numerics::QuadratureSpec& mesh = numerics::kPrecisionMesh);

/// log marginal(slopes and intercepts) - log marginal(means only).
reg::LogBf log_bf_hlm(const HlmDataset& data, const HlmHypers& hypers);

/// Data-calibrated defaults: LS-estimate moments for mu0/Lambda0, pooled
/// residual variance for sigma0², nu0 = 1 and a moment-matched g.
HlmHypers default_hlm_hypers(const HlmDataset& data);

/// Brute-force prior sampling: draw γ, θ and every β_j, average the likelihood.
numerics::McEstimate mc_oracle_log_marginal_hlm(const HlmDataset& data, HlmModel model,
                                                const HlmHypers& hypers, std::size_t n_draws,
                                                std::uint64_t seed);

// --- slices ----------------------------------------------------------------

/// The eight scalar hyperparameters in slice order.
const std::vector<std::string>& hyper_names();
double get_hyper(const HlmHypers& h, std::string_view name);
HlmHypers with_hyper(HlmHypers h, std::string_view name, double value);
/// True when the hyperparameter is positive-constrained and swept on a log grid.
bool hyper_is_log(std::string_view name);

struct Slice {
  std::string hyper;
  std::vector<double> grid;
  std::vector<double> log_bf;  // NaN where skipped
  std::vector<bool> skipped;   // point would make Lambda0 non-SPD
};

/// Default sweep grid for one hyperparameter around the center.
std::vector<double> slice_grid(const HlmHypers& center, std::string_view name, std::size_t points);

Slice hlm_slice(const HlmDataset& data, const HlmHypers& center, std::string_view name,
                const std::vector<double>& grid);
std::vector<Slice> hlm_slices(const HlmDataset& data, const HlmHypers& center,
                              std::size_t points_per_slice = 15);

std::string slices_to_csv(const std::vector<Slice>& slices);

// --- classical comparison --------------------------------------------------

/// Maximum-likelihood linear mixed model with random effects on the model's
/// design (random intercept and slope, or random intercept only).
struct MixedModelFit {
  double log_lik = 0.0;
  int n_params = 0;
  double bic = 0.0;
  Eigen::VectorXd beta;
  double sigma_sq = 0.0;
  Eigen::MatrixXd psi;  // random-effect covariance
};
MixedModelFit fit_mixed_model(const HlmDataset& data, HlmModel model);
/// Profiled deviance at relative covariance factor parameters theta.
double mixed_model_deviance(const HlmDataset& data, HlmModel model, const Eigen::VectorXd& theta);

}  // namespace bfsurf::hlm

namespace bfsurf::reference {
/// Serial slice sweep, kept for checking the parallel one.
std::vector<hlm::Slice> hlm_slices(const hlm::HlmDataset& data, const hlm::HlmHypers& center,
                                   std::size_t points_per_slice = 15);
}
