#include "bfsurf/design.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <numeric>

#include <json.hpp>

#include "bfsurf/csv.hpp"
#include "bfsurf/errors.hpp"
#include "bfsurf/rng.hpp"

namespace bfsurf::design {

std::string_view to_string(Scale s) { return s == Scale::log10 ? "log10" : "linear"; }

Scale scale_from_string(std::string_view s) {
  if (s == "linear") return Scale::linear;
  if (s == "log10" || s == "log") return Scale::log10;
  throw Error(Errc::invalid_argument, "scale must be linear or log10", "scale");
}

HyperBox::HyperBox(std::vector<Dim> dims) : dims_(std::move(dims)) {
  for (const auto& d : dims_) {
    if (d.name.empty()) throw Error(Errc::invalid_argument, "dimension needs a name", "name");
    if (!std::isfinite(d.lower) || !std::isfinite(d.upper) || !(d.upper > d.lower))
      throw Error(Errc::invalid_argument, "upper must exceed lower for " + d.name, d.name);
    if (d.scale == Scale::log10 && !(d.lower > 0.0))
      throw Error(Errc::invalid_argument, "log10 dimension needs a positive lower bound: " + d.name, d.name);
  }
  for (std::size_t i = 0; i < dims_.size(); ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (dims_[i].name == dims_[j].name)
        throw Error(Errc::invalid_argument, "duplicate dimension " + dims_[i].name, dims_[i].name);
}

int HyperBox::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < dims_.size(); ++i)
    if (dims_[i].name == name) return static_cast<int>(i);
  return -1;
}

double HyperBox::to_scaled(std::size_t i, double native) const {
  const Dim& d = dims_.at(i);
  if (d.scale == Scale::log10)
    return (std::log10(native) - std::log10(d.lower)) / (std::log10(d.upper) - std::log10(d.lower));
  return (native - d.lower) / (d.upper - d.lower);
}

double HyperBox::to_native(std::size_t i, double scaled) const {
  const Dim& d = dims_.at(i);
  if (d.scale == Scale::log10) {
    const double lo = std::log10(d.lower), hi = std::log10(d.upper);
    // pin the ends so grids hit the bounds exactly
    if (scaled == 0.0) return d.lower;
    if (scaled == 1.0) return d.upper;
    return std::pow(10.0, lo + scaled * (hi - lo));
  }
  if (scaled == 1.0) return d.upper;
  return d.lower + scaled * (d.upper - d.lower);
}

Eigen::MatrixXd HyperBox::to_scaled(const Eigen::MatrixXd& native) const {
  if (static_cast<std::size_t>(native.cols()) != size())
    throw Error(Errc::invalid_argument, "point dimension does not match box");
  Eigen::MatrixXd out(native.rows(), native.cols());
  for (Eigen::Index r = 0; r < native.rows(); ++r)
    for (Eigen::Index c = 0; c < native.cols(); ++c) out(r, c) = to_scaled(static_cast<std::size_t>(c), native(r, c));
  return out;
}

Eigen::MatrixXd HyperBox::to_native(const Eigen::MatrixXd& scaled) const {
  if (static_cast<std::size_t>(scaled.cols()) != size())
    throw Error(Errc::invalid_argument, "point dimension does not match box");
  Eigen::MatrixXd out(scaled.rows(), scaled.cols());
  for (Eigen::Index r = 0; r < scaled.rows(); ++r)
    for (Eigen::Index c = 0; c < scaled.cols(); ++c) out(r, c) = to_native(static_cast<std::size_t>(c), scaled(r, c));
  return out;
}

Dim parse_dim(std::string_view spec) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const auto pos = spec.find(':', start);
    parts.emplace_back(spec.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  if (parts.size() != 4) throw Error(Errc::invalid_argument, "dimension spec must be name:scale:lower:upper", "dim");
  Dim d;
  d.name = parts[0];
  d.scale = scale_from_string(parts[1]);
  try {
    d.lower = std::stod(parts[2]);
    d.upper = std::stod(parts[3]);
  } catch (const std::exception&) {
    throw Error(Errc::invalid_argument, "dimension bounds must be numbers: " + std::string(spec), "dim");
  }
  if (d.scale == Scale::log10) {
    d.lower = std::pow(10.0, d.lower);
    d.upper = std::pow(10.0, d.upper);
  }
  return d;
}

std::pair<HyperBox, std::vector<int>> parse_grid(std::string_view spec) {
  std::vector<Dim> dims;
  std::vector<int> counts;
  std::size_t start = 0;
  while (start <= spec.size()) {
    const auto comma = spec.find(',', start);
    const auto item = spec.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start);
    const auto colon = item.rfind(':');
    if (colon == std::string_view::npos)
      throw Error(Errc::invalid_argument, "grid spec must be name:scale:lower:upper:count", "grid");
    dims.push_back(parse_dim(item.substr(0, colon)));
    int c = 0;
    const auto tail = item.substr(colon + 1);
    const auto [ptr, ec] = std::from_chars(tail.data(), tail.data() + tail.size(), c);
    if (ec != std::errc{} || ptr != tail.data() + tail.size() || c < 1)
      throw Error(Errc::invalid_argument, "grid count must be a positive integer: " + std::string(item), "grid");
    counts.push_back(c);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return {HyperBox(std::move(dims)), counts};
}

Design grid_design(const HyperBox& box, const std::vector<int>& counts, std::size_t cap) {
  if (counts.size() != box.size()) throw Error(Errc::invalid_argument, "one count per dimension required", "counts");
  std::size_t total = 1;
  for (int c : counts) {
    if (c < 1) throw Error(Errc::invalid_argument, "grid counts must be positive", "counts");
    if (total > cap / static_cast<std::size_t>(c)) throw Error(Errc::grid_too_large, "grid too large", "counts");
    total *= static_cast<std::size_t>(c);
  }
  if (total > cap) throw Error(Errc::grid_too_large, "grid too large", "counts");
  const auto d = box.size();
  Design out;
  out.box = box;
  out.points.resize(static_cast<Eigen::Index>(total), static_cast<Eigen::Index>(d));
  for (std::size_t r = 0; r < total; ++r) {
    std::size_t rem = r;
    for (std::size_t k = d; k-- > 0;) {
      const auto c = static_cast<std::size_t>(counts[k]);
      const std::size_t idx = rem % c;
      rem /= c;
      const double u = c == 1 ? 0.5 : static_cast<double>(idx) / static_cast<double>(c - 1);
      out.points(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = box.to_native(k, u);
    }
  }
  return out;
}

Eigen::MatrixXd plain_lhs_unit(std::size_t n, std::size_t d, std::uint64_t seed) {
  if (n < 1 || d < 1) throw Error(Errc::invalid_argument, "LHS needs n >= 1 and d >= 1", "n");
  CounterRng rng(stream_key(seed, 0x1A5));
  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  std::vector<std::size_t> perm(n);
  const double nd = static_cast<double>(n);
  for (std::size_t j = 0; j < d; ++j) {
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    for (std::size_t i = 0; i < n; ++i)
      x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = (static_cast<double>(perm[i]) + rng.uniform()) / nd;
  }
  return x;
}

double min_distance(const Eigen::MatrixXd& x) {
  double best = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index k = i + 1; k < x.rows(); ++k) best = std::min(best, (x.row(i) - x.row(k)).squaredNorm());
  return std::sqrt(best);
}

namespace {

// Swap-based maximin improvement of one LHS. Keeps the full squared distance
// matrix plus each row's nearest neighbour so a proposal costs O(n).
class Maximin {
 public:
  Maximin(const Eigen::MatrixXd& start, std::uint64_t key)
      : n_(static_cast<std::size_t>(start.rows())), d_(static_cast<std::size_t>(start.cols())),
        x_(n_ * d_), dist_(n_ * n_, 0.0), rmin_(n_), rarg_(n_), rng_(key) {
    for (std::size_t i = 0; i < n_; ++i)
      for (std::size_t c = 0; c < d_; ++c) x_[i * d_ + c] = start(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c));
    for (std::size_t i = 0; i < n_; ++i)
      for (std::size_t k = i + 1; k < n_; ++k) dist_[i * n_ + k] = dist_[k * n_ + i] = exact(i, k);
    for (std::size_t i = 0; i < n_; ++i) refresh_row(i);
  }

  void run(int sweeps) {
    if (n_ < 3) return;
    for (int s = 0; s < sweeps; ++s) {
      bool accepted = false;
      for (std::size_t t = 0; t < n_; ++t) accepted = propose() || accepted;
      if (!accepted) break;
    }
  }

  Eigen::MatrixXd points() const {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(n_), static_cast<Eigen::Index>(d_));
    for (std::size_t i = 0; i < n_; ++i)
      for (std::size_t c = 0; c < d_; ++c) out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = x_[i * d_ + c];
    return out;
  }

 private:
  double exact(std::size_t i, std::size_t k) const {
    double s = 0.0;
    for (std::size_t c = 0; c < d_; ++c) {
      const double diff = x_[i * d_ + c] - x_[k * d_ + c];
      s += diff * diff;
    }
    return s;
  }

  void refresh_row(std::size_t i) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = i;
    const double* row = &dist_[i * n_];
    for (std::size_t k = 0; k < n_; ++k)
      if (k != i && row[k] < best) best = row[k], arg = k;
    rmin_[i] = best;
    rarg_[i] = arg;
  }

  // Row k's nearest distance ignoring partners a and b.
  double min_excluding(std::size_t k, std::size_t a, std::size_t b) const {
    double best = std::numeric_limits<double>::infinity();
    const double* row = &dist_[k * n_];
    for (std::size_t q = 0; q < n_; ++q)
      if (q != k && q != a && q != b) best = std::min(best, row[q]);
    return best;
  }

  bool propose() {
    const std::size_t i = static_cast<std::size_t>(std::min_element(rmin_.begin(), rmin_.end()) - rmin_.begin());
    const double dmin = rmin_[i];
    const std::size_t a = rng_.below(2) == 0 ? i : rarg_[i];
    std::size_t b = rng_.below(n_ - 1);
    if (b >= a) ++b;
    const std::size_t c = rng_.below(d_);
    const double xa = x_[a * d_ + c], xb = x_[b * d_ + c];

    // distances of a and b to everyone else after exchanging column c
    if (!(dist_[a * n_ + b] > dmin)) return false;
    for (std::size_t k = 0; k < n_; ++k) {
      if (k == a || k == b) continue;
      const double xk = x_[k * d_ + c];
      const double ka = (xa - xk) * (xa - xk), kb = (xb - xk) * (xb - xk);
      if (!(dist_[a * n_ + k] + kb - ka > dmin) || !(dist_[b * n_ + k] + ka - kb > dmin)) return false;
    }
    // every untouched pair must also sit above the old minimum
    for (std::size_t k = 0; k < n_; ++k) {
      if (k == a || k == b || rmin_[k] > dmin) continue;
      if (rarg_[k] != a && rarg_[k] != b) return false;
      if (!(min_excluding(k, a, b) > dmin)) return false;
    }

    x_[a * d_ + c] = xb;
    x_[b * d_ + c] = xa;
    for (std::size_t k = 0; k < n_; ++k) {
      if (k == a || k == b) continue;
      dist_[a * n_ + k] = dist_[k * n_ + a] = exact(a, k);
      dist_[b * n_ + k] = dist_[k * n_ + b] = exact(b, k);
    }
    refresh_row(a);
    refresh_row(b);
    for (std::size_t k = 0; k < n_; ++k) {
      if (k == a || k == b) continue;
      if (rarg_[k] == a || rarg_[k] == b) {
        refresh_row(k);
        continue;
      }
      if (dist_[k * n_ + a] < rmin_[k]) rmin_[k] = dist_[k * n_ + a], rarg_[k] = a;
      if (dist_[k * n_ + b] < rmin_[k]) rmin_[k] = dist_[k * n_ + b], rarg_[k] = b;
    }
    return true;
  }

  std::size_t n_, d_;
  std::vector<double> x_, dist_, rmin_;
  std::vector<std::size_t> rarg_;
  CounterRng rng_;
};

Eigen::MatrixXd run_restart(std::size_t n, std::size_t d, std::uint64_t seed, int r, int sweeps) {
  const std::uint64_t start_seed = r == 0 ? seed : stream_key(seed, 0xBB, static_cast<std::uint64_t>(r));
  Maximin opt(plain_lhs_unit(n, d, start_seed), stream_key(seed, 0xAA, static_cast<std::uint64_t>(r)));
  opt.run(sweeps);
  return opt.points();
}

void check_lhs_args(const HyperBox& box, std::size_t n, int restarts, int sweeps) {
  if (n < 2) throw Error(Errc::invalid_argument, "LHS needs n >= 2", "n");
  if (box.size() == 0) throw Error(Errc::invalid_argument, "box has no dimensions", "box");
  if (restarts < 1) throw Error(Errc::invalid_argument, "restarts must be positive", "restarts");
  if (sweeps < 0) throw Error(Errc::invalid_argument, "sweeps must be non-negative", "sweeps");
}

Design pick_best(const HyperBox& box, const std::vector<Eigen::MatrixXd>& runs) {
  std::size_t best = 0;
  double best_d = -1.0;
  for (std::size_t r = 0; r < runs.size(); ++r) {
    const double md = min_distance(runs[r]);
    if (md > best_d) best_d = md, best = r;  // strict: ties keep the lower index
  }
  return {box, box.to_native(runs[best]), 1};
}

}  // namespace

Design plain_lhs(const HyperBox& box, std::size_t n, std::uint64_t seed) {
  check_lhs_args(box, n, 1, 0);
  return {box, box.to_native(plain_lhs_unit(n, box.size(), seed)), 1};
}

Design lhs_maximin(const HyperBox& box, std::size_t n, std::uint64_t seed, int restarts, int sweeps) {
  check_lhs_args(box, n, restarts, sweeps);
  std::vector<Eigen::MatrixXd> runs(static_cast<std::size_t>(restarts));
#pragma omp parallel for schedule(dynamic)
  for (int r = 0; r < restarts; ++r) runs[static_cast<std::size_t>(r)] = run_restart(n, box.size(), seed, r, sweeps);
  return pick_best(box, runs);
}

Design with_replicates(Design design, int r) {
  if (r < 1) throw Error(Errc::invalid_argument, "replicates must be at least 1", "replicates");
  design.replicates = r;
  return design;
}

std::uint64_t evaluation_seed(std::uint64_t base, std::size_t location, int replicate) {
  return stream_key(base, 0xE7A1, location, static_cast<std::uint64_t>(replicate));
}

std::string to_csv(const Design& d) {
  std::string out;
  for (const auto& dim : d.box.dims()) out += dim.name + ",";
  out += "replicate\n";
  for (Eigen::Index i = 0; i < d.points.rows(); ++i)
    for (int r = 0; r < d.replicates; ++r) {
      for (Eigen::Index c = 0; c < d.points.cols(); ++c) out += csv::format(d.points(i, c)) + ",";
      out += std::to_string(r) + "\n";
    }
  return out;
}

std::string to_json(const Design& d) {
  nlohmann::json j;
  j["dims"] = nlohmann::json::array();
  for (const auto& dim : d.box.dims())
    j["dims"].push_back({{"name", dim.name}, {"lower", dim.lower}, {"upper", dim.upper}, {"scale", to_string(dim.scale)}});
  j["points"] = nlohmann::json::array();
  for (Eigen::Index i = 0; i < d.points.rows(); ++i) {
    auto row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < d.points.cols(); ++c) row.push_back(d.points(i, c));
    j["points"].push_back(row);
  }
  j["replicates"] = d.replicates;
  return j.dump();
}

Design design_from_json(std::string_view text) {
  try {
    const auto j = nlohmann::json::parse(text);
    std::vector<Dim> dims;
    for (const auto& jd : j.at("dims"))
      dims.push_back({jd.at("name").get<std::string>(), jd.at("lower").get<double>(), jd.at("upper").get<double>(),
                      scale_from_string(jd.at("scale").get<std::string>())});
    Design d;
    d.box = HyperBox(std::move(dims));
    const auto& pts = j.at("points");
    d.points.resize(static_cast<Eigen::Index>(pts.size()), static_cast<Eigen::Index>(d.box.size()));
    for (std::size_t i = 0; i < pts.size(); ++i) {
      if (pts[i].size() != d.box.size()) throw Error(Errc::parse_error, "design point has wrong length", "points");
      for (std::size_t c = 0; c < d.box.size(); ++c)
        d.points(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = pts[i][c].get<double>();
    }
    d.replicates = j.value("replicates", 1);
    if (d.replicates < 1) throw Error(Errc::parse_error, "replicates must be at least 1", "replicates");
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::parse_error, std::string("design JSON: ") + e.what());
  }
}

}  // namespace bfsurf::design

namespace bfsurf::reference {

design::Design lhs_maximin(const design::HyperBox& box, std::size_t n, std::uint64_t seed, int restarts, int sweeps) {
  design::check_lhs_args(box, n, restarts, sweeps);
  std::vector<Eigen::MatrixXd> runs;
  for (int r = 0; r < restarts; ++r) runs.push_back(design::run_restart(n, box.size(), seed, r, sweeps));
  return design::pick_best(box, runs);
}

}  // namespace bfsurf::reference
