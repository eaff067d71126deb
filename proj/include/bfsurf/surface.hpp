#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "bfsurf/design.hpp"
#include "bfsurf/hlm_bf.hpp"
#include "bfsurf/reg_bf.hpp"
#include "bfsurf/surrogate.hpp"

namespace bfsurf::surface {

enum class EvaluatorKind { reg_closed, reg_zs, reg_bic, reg_fractional, reg_noisy, hlm };

std::string_view to_string(EvaluatorKind k);
EvaluatorKind evaluator_from_string(std::string_view s);

/// What to evaluate at each design location. Design dims are bound to
/// hyperparameter names through `mapping` (empty means "use the dim names");
/// anything unmapped keeps the value in the fixed context.
///
/// Regression evaluators take mu, phi, a, b. The automatic procedures (zs,
/// bic, fractional) ignore them and so give flat planes over the same mesh;
/// fractional also takes m, the training-sample size.
struct EvaluatorSpec {
  EvaluatorKind kind = EvaluatorKind::reg_closed;
  std::optional<reg::RegressionData> reg_data;
  reg::RegressionHypers reg_hypers;
  std::size_t n_draws = 10'000;
  std::size_t fractional_m = 3;
  std::optional<hlm::HlmDataset> hlm_data;
  /// Center of the HLM sweep; data-calibrated defaults when absent.
  std::optional<hlm::HlmHypers> hlm_center;
  std::vector<std::string> mapping;

  bool deterministic() const noexcept { return kind != EvaluatorKind::reg_noisy; }
};

/// Hyperparameter names the evaluator accepts.
std::vector<std::string> accepted_hypers(EvaluatorKind k);

/// Throws Errc::invalid_argument when the evaluator lacks its dataset or a design
/// dim does not map to exactly one accepted hyperparameter.
void check_compatible(const EvaluatorSpec& spec, const design::HyperBox& box);

struct SurfaceSample {
  std::vector<double> location;  // native units
  std::size_t location_index = 0;
  int replicate = 0;
  double log_bf = 0.0;
  double std_err = 0.0;
  double eval_seconds = 0.0;
  /// Empty for a good sample; otherwise the evaluation error text and log_bf is NaN.
  std::string error;

  bool ok() const noexcept { return error.empty(); }
};

struct Surface {
  std::vector<std::string> dims;
  std::vector<SurfaceSample> samples;  // location-major, then replicate

  std::size_t failed() const;
};

using Progress = std::function<void(std::size_t done, std::size_t total)>;

/// Runs one evaluation per (location, replicate). Noisy evaluators are seeded
/// by design::evaluation_seed(seed, location, replicate), so the output does not
/// depend on the schedule. A failing point becomes a marker sample; the sweep
/// throws only when every point fails. `workers` = 0 uses the OpenMP default.
/// `progress` is called from worker threads.
Surface evaluate_surface(const EvaluatorSpec& spec, const design::Design& design, std::uint64_t seed,
                         int workers = 0, const Progress& progress = {});

// --- evidence classes ------------------------------------------------------

enum class Strength { negligible, positive, strong, very_strong };
enum class Direction { favors_M1, favors_M2 };

struct EvidenceClass {
  Strength strength = Strength::negligible;
  Direction direction = Direction::favors_M1;

  bool operator==(const EvidenceClass&) const = default;
};

/// Natural-log thresholds 1, 3, 5 on |log_bf|; a value on a threshold goes to
/// the lower class; log_bf >= 0 favors M1.
EvidenceClass classify(double log_bf);

std::string_view to_string(Strength s);
std::string_view to_string(Direction d);
/// "strength/direction", e.g. "strong/favors_M1".
std::string to_string(EvidenceClass c);

// --- export ----------------------------------------------------------------

/// `dims…,replicate,log_bf,std_err,class` at 17 significant digits. Failed
/// points carry NA values and class "failed".
std::string to_csv(const Surface& s);
std::string to_json(const Surface& s);
Surface surface_from_csv(std::string_view text);
Surface surface_from_json(std::string_view text);

/// Provenance record: evaluator settings, dataset fingerprint, design, seed,
/// software version and timing.
std::string manifest_json(const EvaluatorSpec& spec, const design::Design& design, std::uint64_t seed,
                          const Surface& result);

/// Good samples as surrogate training data on the box's [0,1] scale.
surrogate::TrainingSet training_set(const Surface& s, const design::HyperBox& box);

}  // namespace bfsurf::surface

namespace bfsurf::reference {
/// One evaluation after another; same samples as surface::evaluate_surface.
surface::Surface evaluate_surface(const surface::EvaluatorSpec& spec, const design::Design& design,
                                  std::uint64_t seed);
}
