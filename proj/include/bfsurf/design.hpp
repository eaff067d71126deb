#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace bfsurf::design {

enum class Scale { linear, log10 };

std::string_view to_string(Scale s);
Scale scale_from_string(std::string_view s);

/// One axis of a hyperparameter box. Bounds are in native units, so a log10
/// axis over [1e-3, 10] is stored as lower = 1e-3, upper = 10.
struct Dim {
  std::string name;
  double lower = 0.0;
  double upper = 1.0;
  Scale scale = Scale::linear;
};

class HyperBox {
 public:
  HyperBox() = default;
  explicit HyperBox(std::vector<Dim> dims);

  std::size_t size() const noexcept { return dims_.size(); }
  const std::vector<Dim>& dims() const noexcept { return dims_; }
  const Dim& operator[](std::size_t i) const { return dims_[i]; }
  int index_of(std::string_view name) const;

  /// Native units to [0,1] along dimension i, and back.
  double to_scaled(std::size_t i, double native) const;
  double to_native(std::size_t i, double scaled) const;
  Eigen::MatrixXd to_scaled(const Eigen::MatrixXd& native) const;
  Eigen::MatrixXd to_native(const Eigen::MatrixXd& scaled) const;

 private:
  std::vector<Dim> dims_;
};

/// Parses "name:scale:lower:upper". Scale is linear or log10; log10 bounds
/// are written as exponents, so "phi:log10:-3:1" spans [1e-3, 10].
Dim parse_dim(std::string_view spec);

/// Comma-separated "name:scale:lower:upper:count" items, as used by the CLI.
std::pair<HyperBox, std::vector<int>> parse_grid(std::string_view spec);

struct Design {
  HyperBox box;
  Eigen::MatrixXd points;  // rows are locations, native units
  int replicates = 1;

  std::size_t locations() const noexcept { return static_cast<std::size_t>(points.rows()); }
  std::size_t evaluations() const noexcept { return locations() * static_cast<std::size_t>(replicates); }
};

inline constexpr std::size_t kDefaultGridCap = 1'000'000;

/// Full factorial over equispaced (in scaled space) per-dimension sequences.
/// The last dimension varies fastest. A count of 1 places the midpoint.
Design grid_design(const HyperBox& box, const std::vector<int>& counts, std::size_t cap = kDefaultGridCap);

/// Midpoint-jittered Latin hypercube in [0,1]^d: column j holds
/// (π_j(i) + U)/n for a random permutation π_j.
Eigen::MatrixXd plain_lhs_unit(std::size_t n, std::size_t d, std::uint64_t seed);

/// Smallest pairwise Euclidean distance between rows.
double min_distance(const Eigen::MatrixXd& x);

/// Maximin LHS by within-column swaps. Restart 0 improves the plain LHS drawn
/// from `seed`; the remaining restarts start from independent LHS draws. Each
/// sweep makes n swap proposals; a sweep with no accepted swap ends a restart.
Design lhs_maximin(const HyperBox& box, std::size_t n, std::uint64_t seed, int restarts = 20, int sweeps = 50);

/// Plain (unoptimized) LHS with the same seed convention as restart 0.
Design plain_lhs(const HyperBox& box, std::size_t n, std::uint64_t seed);

Design with_replicates(Design design, int r);

/// Seed for the evaluation at (location, replicate), derived from a base seed.
std::uint64_t evaluation_seed(std::uint64_t base, std::size_t location, int replicate);

/// CSV with one column per dimension (native units) and a replicate column,
/// one row per pending evaluation.
std::string to_csv(const Design& d);
std::string to_json(const Design& d);
Design design_from_json(std::string_view text);

}  // namespace bfsurf::design

namespace bfsurf::reference {
/// Restarts run one after another; same result as design::lhs_maximin.
design::Design lhs_maximin(const design::HyperBox& box, std::size_t n, std::uint64_t seed, int restarts = 20,
                           int sweeps = 50);
}
