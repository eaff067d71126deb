#include "bfsurf/hlm_bf.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <limits>
#include <numbers>
#include <sstream>
#include <unordered_map>

#include "bfsurf/csv.hpp"
#include "bfsurf/errors.hpp"
#include "bfsurf/rng.hpp"
#include "detail/mc_blocks.hpp"

namespace bfsurf::hlm {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;  // log(2π)

}  // namespace

HlmDataset::HlmDataset(std::vector<HlmGroup> groups) : groups_(std::move(groups)) {
  if (groups_.empty()) throw Error(Errc::too_few_groups, "dataset has no groups");
  stats_.reserve(groups_.size());
  for (auto& grp : groups_) {
    if (grp.y.size() != grp.ses.size())
      throw Error(Errc::invalid_argument, "group " + grp.id + ": y and ses lengths differ");
    if (grp.y.size() < 2) throw Error(Errc::group_too_small, "group too small: " + grp.id, grp.id);
    double raw_ss = 0.0, mean = 0.0;
    for (std::size_t i = 0; i < grp.y.size(); ++i) {
      if (!std::isfinite(grp.y[i]) || !std::isfinite(grp.ses[i]))
        throw Error(Errc::invalid_argument, "group " + grp.id + ": non-finite value");
      mean += grp.ses[i];
      raw_ss += grp.ses[i] * grp.ses[i];
    }
    mean /= static_cast<double>(grp.ses.size());
    GroupStats st;
    st.n = static_cast<double>(grp.y.size());
    for (std::size_t i = 0; i < grp.y.size(); ++i) {
      grp.ses[i] -= mean;
      st.sum_y += grp.y[i];
      st.sum_yy += grp.y[i] * grp.y[i];
      st.sum_ss += grp.ses[i] * grp.ses[i];
      st.sum_sy += grp.ses[i] * grp.y[i];
    }
    // centering leaves rounding dust when ses is constant
    st.constant_ses = !(st.sum_ss > 1e-14 * raw_ss + 1e-300);
    total_ += grp.y.size();
    stats_.push_back(st);
  }
}

void HlmHypers::validate() const {
  if (!(g > 0.0) || !std::isfinite(g)) throw Error(Errc::invalid_argument, "g must be positive", "g");
  if (!(nu0 > 0.0) || !std::isfinite(nu0)) throw Error(Errc::invalid_argument, "nu0 must be positive", "nu0");
  if (!(sigma0_sq > 0.0) || !std::isfinite(sigma0_sq))
    throw Error(Errc::invalid_argument, "sigma0_sq must be positive", "sigma0_sq");
  if (!mu0.allFinite()) throw Error(Errc::invalid_argument, "mu0 must be finite", "mu0");
  if (!lambda0.allFinite() || lambda0(0, 1) != lambda0(1, 0))
    throw Error(Errc::invalid_argument, "Lambda0 must be symmetric", "lambda0");
  if (!(lambda0(0, 0) > 0.0) || !(lambda0.determinant() > 0.0))
    throw Error(Errc::not_positive_definite, "Lambda0 must be positive definite", "lambda0");
}

// ---------------------------------------------------------------------------
// I/O

HlmDataset load_hlm_csv(std::string_view text) {
  const auto t = csv::parse(text);
  const int cs = t.column("school"), cx = t.column("ses"), cy = t.column("mathscore");
  if (cs < 0 || cx < 0 || cy < 0) throw Error(Errc::parse_error, "HLM CSV needs header school,ses,mathscore");
  std::vector<HlmGroup> groups;
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    const std::string& id = row[static_cast<std::size_t>(cs)];
    if (id.empty())
      throw Error(Errc::parse_error, "line " + std::to_string(t.line_numbers[r]) + ": missing school");
    const double x = csv::to_double(row[static_cast<std::size_t>(cx)], t.line_numbers[r], "ses");
    const double y = csv::to_double(row[static_cast<std::size_t>(cy)], t.line_numbers[r], "mathscore");
    auto [it, fresh] = index.try_emplace(id, groups.size());
    if (fresh) groups.push_back({id, {}, {}});
    groups[it->second].ses.push_back(x);
    groups[it->second].y.push_back(y);
  }
  return HlmDataset(std::move(groups));
}

HlmDataset load_hlm_csv_file(const std::filesystem::path& path) {
  return load_hlm_csv(csv::read_file(path.string()));
}

std::string to_csv(const HlmDataset& data) {
  std::string out = "school,ses,mathscore\n";
  for (const auto& grp : data.groups())
    for (std::size_t i = 0; i < grp.y.size(); ++i)
      out += grp.id + "," + csv::format(grp.ses[i]) + "," + csv::format(grp.y[i]) + "\n";
  return out;
}

HlmDataset synthetic_hlm(std::uint64_t seed, const SyntheticHlmSpec& spec) {
  if (spec.m < 1) throw Error(Errc::invalid_argument, "m must be positive", "m");
  if (!(spec.g > 0.0) || !(spec.sigma_sq > 0.0))
    throw Error(Errc::invalid_argument, "g and sigma_sq must be positive");
  std::vector<HlmGroup> groups;
  groups.reserve(spec.m);
  for (std::size_t j = 0; j < spec.m; ++j) {
    CounterRng rng(stream_key(seed, 0x41A, j));
    const std::size_t n = 10 + static_cast<std::size_t>(rng.below(21));
    HlmGroup grp{std::to_string(j + 1), std::vector<double>(n), std::vector<double>(n)};
    double mean = 0.0;
    for (auto& s : grp.ses) {
      s = 0.8 * rng.normal();
      mean += s;
    }
    mean /= static_cast<double>(n);
    double sss = 0.0;
    for (auto& s : grp.ses) {
      s -= mean;
      sss += s * s;
    }
    // β_j ~ N(θ, (g σ²) (XᵀX)^{-1}); XᵀX = diag(n, Σs²) after centering
    const double scale = std::sqrt(spec.g * spec.sigma_sq);
    const double b0 = spec.theta0 + scale / std::sqrt(static_cast<double>(n)) * rng.normal();
    double b1 = spec.theta1 + scale / std::sqrt(sss) * rng.normal();
    if (spec.means_only) b1 = 0.0;
    const double sd = std::sqrt(spec.sigma_sq);
    for (std::size_t i = 0; i < n; ++i) grp.y[i] = b0 + b1 * grp.ses[i] + sd * rng.normal();
    groups.push_back(std::move(grp));
  }
  return HlmDataset(std::move(groups));
}

// ---------------------------------------------------------------------------
// Marginal likelihood

namespace {

template <int P>
struct Aggregates {
  using Mat = Eigen::Matrix<double, P, P>;
  using Vec = Eigen::Matrix<double, P, 1>;
  Mat gram = Mat::Zero();  // Σ XᵀX
  Vec xty = Vec::Zero();   // Σ Xᵀy
  double yy = 0.0;         // Σ yᵀy
  double fit = 0.0;        // Σ yᵀX β̂
};

template <int P>
Aggregates<P> aggregate(const HlmDataset& data) {
  Aggregates<P> a;
  for (std::size_t j = 0; j < data.m(); ++j) {
    const auto& st = data.stats()[j];
    a.gram(0, 0) += st.n;
    a.xty(0) += st.sum_y;
    a.yy += st.sum_yy;
    a.fit += st.sum_y * st.sum_y / st.n;
    if constexpr (P == 2) {
      if (st.constant_ses)
        throw Error(Errc::degenerate_group_design,
                    "degenerate group design: ses is constant in group " + data.groups()[j].id,
                    data.groups()[j].id);
      a.gram(1, 1) += st.sum_ss;
      a.xty(1) += st.sum_sy;
      a.fit += st.sum_sy * st.sum_sy / st.sum_ss;
    }
  }
  return a;
}

template <int P>
double log_marginal_impl(const HlmDataset& data, const HlmHypers& hy, const numerics::QuadratureSpec& mesh) {
  using Mat = typename Aggregates<P>::Mat;
  using Vec = typename Aggregates<P>::Vec;
  const Aggregates<P> agg = aggregate<P>(data);
  const Vec mu0 = hy.mu0.template head<P>();
  const Mat lam0 = hy.lambda0.template topLeftCorner<P, P>();
  const Eigen::LLT<Mat> lam_llt(lam0);
  const Mat lam_inv = lam_llt.solve(Mat::Identity());
  const Vec lam_inv_mu = lam_llt.solve(mu0);
  const double logdet_lam = 2.0 * lam_llt.matrixLLT().diagonal().array().log().sum();

  const double nn = static_cast<double>(data.total());
  const double m = static_cast<double>(data.m());
  const double g1 = hy.g + 1.0;
  const double rate = hy.nu0 * hy.sigma0_sq;  // γ prior rate is rate/2
  const double s3 = agg.yy - hy.g / g1 * agg.fit;
  const Mat s2 = agg.gram / g1;
  const Vec half_s1 = agg.xty / g1;  // -S1ᵀ/2

  const double prefactor = -0.5 * nn * kLog2Pi - 0.5 * logdet_lam - 0.5 * m * P * std::log(g1) +
                           0.5 * hy.nu0 * std::log(0.5 * rate) - std::lgamma(0.5 * hy.nu0) -
                           0.5 * mu0.dot(lam_inv_mu);
  const double power = 0.5 * nn + 0.5 * hy.nu0 - 1.0;

  auto integrand = [&](double gamma) {
    const Mat a = gamma * s2 + lam_inv;
    const Vec h = gamma * half_s1 + lam_inv_mu;
    const Eigen::LLT<Mat> llt(a);
    const double logdet_a = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    return power * std::log(gamma) - 0.5 * logdet_a - 0.5 * gamma * (s3 + rate) + 0.5 * h.dot(llt.solve(h));
  };
  return prefactor + numerics::log_trapezoid(integrand, mesh);
}

}  // namespace

double log_marginal_hlm(const HlmDataset& data, HlmModel model, const HlmHypers& hypers,
                        const numerics::QuadratureSpec& mesh) {
  hypers.validate();
  return model == HlmModel::slopes_and_intercepts ? log_marginal_impl<2>(data, hypers, mesh)
                                                  : log_marginal_impl<1>(data, hypers, mesh);
}

reg::LogBf log_bf_hlm(const HlmDataset& data, const HlmHypers& hypers) {
  reg::LogBf out;
  out.value = log_marginal_hlm(data, HlmModel::slopes_and_intercepts, hypers) -
              log_marginal_hlm(data, HlmModel::means_only, hypers);
  out.method = reg::BfMethod::closed_quadrature;
  return out;
}

HlmHypers default_hlm_hypers(const HlmDataset& data) {
  const std::size_t m = data.m();
  if (m < 3) throw Error(Errc::too_few_groups, "too few groups to calibrate (need at least 3)");
  std::vector<Eigen::Vector2d> est(m);
  Eigen::Vector2d mean = Eigen::Vector2d::Zero();
  Eigen::Matrix2d avg_inv_gram = Eigen::Matrix2d::Zero();
  double rss = 0.0, dof = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    const auto& st = data.stats()[j];
    if (st.constant_ses)
      throw Error(Errc::degenerate_group_design,
                  "degenerate group design: ses is constant in group " + data.groups()[j].id,
                  data.groups()[j].id);
    est[j] = {st.sum_y / st.n, st.sum_sy / st.sum_ss};
    mean += est[j];
    avg_inv_gram(0, 0) += 1.0 / st.n;
    avg_inv_gram(1, 1) += 1.0 / st.sum_ss;
    rss += std::max(st.sum_yy - st.sum_y * st.sum_y / st.n - st.sum_sy * st.sum_sy / st.sum_ss, 0.0);
    dof += st.n - 2.0;
  }
  mean /= static_cast<double>(m);
  avg_inv_gram /= static_cast<double>(m);
  Eigen::Matrix2d cov = Eigen::Matrix2d::Zero();
  for (const auto& e : est) cov += (e - mean) * (e - mean).transpose();
  cov /= static_cast<double>(m - 1);

  HlmHypers h;
  h.mu0 = mean;
  h.lambda0 = cov;
  h.nu0 = 1.0;
  if (!(dof > 0.0)) throw Error(Errc::degenerate_data, "calibration degenerate: no residual degrees of freedom");
  h.sigma0_sq = rss / dof;
  const double scale = std::max(1.0, cov.trace());
  if (!(cov(0, 0) > 0.0) || !(cov.determinant() > 1e-12 * scale * scale))
    throw Error(Errc::degenerate_data, "calibration degenerate: covariance of group estimates is singular");
  if (!(h.sigma0_sq > 0.0))
    throw Error(Errc::degenerate_data, "calibration degenerate: zero pooled residual variance");
  const double gamma_hat = 1.0 / h.sigma0_sq;
  const double num = (cov.array() * avg_inv_gram.array()).sum();
  const double den = avg_inv_gram.squaredNorm();
  h.g = gamma_hat * num / den;
  if (!(h.g > 0.0)) throw Error(Errc::degenerate_data, "calibration degenerate: non-positive g");
  return h;
}

// ---------------------------------------------------------------------------
// Monte Carlo oracle

namespace {

struct HlmDraws {
  const HlmDataset* data;
  HlmHypers h;
  int p;
  std::uint64_t seed;
  Eigen::Matrix2d lam_chol;
  double const_term;  // -N/2 log 2π

  double log_lik(std::size_t i) const {
    CounterRng rng(stream_key(seed, static_cast<std::uint64_t>(p), i));
    const double gamma = rng.gamma(0.5 * h.nu0, 0.5 * h.nu0 * h.sigma0_sq);
    Eigen::Vector2d z(rng.normal(), p == 2 ? rng.normal() : 0.0);
    Eigen::Vector2d theta = h.mu0 + lam_chol * z;
    if (p == 1) theta(1) = 0.0;
    const double spread = std::sqrt(h.g / gamma);
    double quad = 0.0;
    for (const auto& st : data->stats()) {
      const double b0 = theta(0) + spread / std::sqrt(st.n) * rng.normal();
      double r = st.sum_yy - 2.0 * b0 * st.sum_y + b0 * b0 * st.n;
      if (p == 2) {
        const double b1 = theta(1) + spread / std::sqrt(st.sum_ss) * rng.normal();
        // cross term vanishes because ses is centered
        r += -2.0 * b1 * st.sum_sy + b1 * b1 * st.sum_ss;
      }
      quad += r;
    }
    return const_term + 0.5 * static_cast<double>(data->total()) * std::log(gamma) - 0.5 * gamma * quad;
  }
};

}  // namespace

numerics::McEstimate mc_oracle_log_marginal_hlm(const HlmDataset& data, HlmModel model,
                                                const HlmHypers& hypers, std::size_t n_draws,
                                                std::uint64_t seed) {
  hypers.validate();
  if (n_draws < 10000) throw Error(Errc::invalid_argument, "oracle needs at least 1e4 draws", "n_draws");
  const int p = dimension(model);
  if (p == 2) (void)aggregate<2>(data);  // degenerate-design check
  HlmDraws d{&data, hypers, p, seed, Eigen::Matrix2d::Zero(),
             -0.5 * static_cast<double>(data.total()) * kLog2Pi};
  if (p == 2) {
    d.lam_chol = hypers.lambda0.llt().matrixL();
  } else {
    d.lam_chol(0, 0) = std::sqrt(hypers.lambda0(0, 0));
  }
  return detail::mc_estimate_parallel(d, n_draws);
}

// ---------------------------------------------------------------------------
// Slices

const std::vector<std::string>& hyper_names() {
  static const std::vector<std::string> names{"g",          "mu0_1", "mu0_2",    "lambda0_11",
                                              "lambda0_22", "lambda0_12", "nu0", "sigma0_sq"};
  return names;
}

double get_hyper(const HlmHypers& h, std::string_view name) {
  if (name == "g") return h.g;
  if (name == "mu0_1") return h.mu0(0);
  if (name == "mu0_2") return h.mu0(1);
  if (name == "lambda0_11") return h.lambda0(0, 0);
  if (name == "lambda0_22") return h.lambda0(1, 1);
  if (name == "lambda0_12") return h.lambda0(0, 1);
  if (name == "nu0") return h.nu0;
  if (name == "sigma0_sq") return h.sigma0_sq;
  throw Error(Errc::invalid_argument, "unknown HLM hyperparameter: " + std::string(name), std::string(name));
}

HlmHypers with_hyper(HlmHypers h, std::string_view name, double value) {
  if (name == "g") h.g = value;
  else if (name == "mu0_1") h.mu0(0) = value;
  else if (name == "mu0_2") h.mu0(1) = value;
  else if (name == "lambda0_11") h.lambda0(0, 0) = value;
  else if (name == "lambda0_22") h.lambda0(1, 1) = value;
  else if (name == "lambda0_12") h.lambda0(0, 1) = h.lambda0(1, 0) = value;
  else if (name == "nu0") h.nu0 = value;
  else if (name == "sigma0_sq") h.sigma0_sq = value;
  else throw Error(Errc::invalid_argument, "unknown HLM hyperparameter: " + std::string(name), std::string(name));
  return h;
}

bool hyper_is_log(std::string_view name) {
  (void)get_hyper(HlmHypers{}, name);
  return !(name == "mu0_1" || name == "mu0_2" || name == "lambda0_12");
}

std::vector<double> slice_grid(const HlmHypers& center, std::string_view name, std::size_t points) {
  center.validate();
  const double c = get_hyper(center, name);
  if (points == 0) throw Error(Errc::invalid_argument, "points_per_slice must be positive", "points_per_slice");
  if (points == 1) return {c};
  double lo, hi;
  if (name == "g") {
    lo = 1e-1;
    hi = 1e4;
  } else if (name == "mu0_1" || name == "mu0_2") {
    const int k = name == "mu0_1" ? 0 : 1;
    const double half = 3.0 * std::sqrt(center.lambda0(k, k));
    lo = c - half;
    hi = c + half;
  } else if (name == "lambda0_12") {
    const double r = 0.95 * std::sqrt(center.lambda0(0, 0) * center.lambda0(1, 1));
    lo = -r;
    hi = r;
  } else {
    lo = c / 10.0;
    hi = c * 10.0;
  }
  std::vector<double> grid(points);
  const bool log_scale = hyper_is_log(name);
  for (std::size_t i = 0; i < points; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(points - 1);
    grid[i] = log_scale ? std::exp(std::log(lo) + t * (std::log(hi) - std::log(lo))) : lo + t * (hi - lo);
  }
  grid.front() = lo;
  grid.back() = hi;
  return grid;
}

namespace {

bool keeps_spd(const HlmHypers& h) {
  return h.lambda0(0, 0) > 0.0 && h.lambda0(1, 1) > 0.0 && h.lambda0.determinant() > 0.0;
}

Slice empty_slice(std::string_view name, const std::vector<double>& grid) {
  Slice s;
  s.hyper = std::string(name);
  s.grid = grid;
  s.log_bf.assign(grid.size(), std::numeric_limits<double>::quiet_NaN());
  s.skipped.assign(grid.size(), false);
  return s;
}

void eval_point(const HlmDataset& data, const HlmHypers& center, Slice& s, std::size_t i) {
  const HlmHypers h = with_hyper(center, s.hyper, s.grid[i]);
  if (!keeps_spd(h)) {
    s.skipped[i] = true;
    return;
  }
  s.log_bf[i] = log_bf_hlm(data, h).value;
}

std::vector<Slice> prepare(const HlmHypers& center, std::size_t points) {
  std::vector<Slice> out;
  for (const auto& name : hyper_names()) out.push_back(empty_slice(name, slice_grid(center, name, points)));
  return out;
}

}  // namespace

Slice hlm_slice(const HlmDataset& data, const HlmHypers& center, std::string_view name,
                const std::vector<double>& grid) {
  center.validate();
  Slice s = empty_slice(name, grid);
  (void)get_hyper(center, name);
  std::exception_ptr err;
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(grid.size()); ++i) {
    try {
      eval_point(data, center, s, static_cast<std::size_t>(i));
    } catch (...) {
#pragma omp critical
      if (!err) err = std::current_exception();
    }
  }
  if (err) std::rethrow_exception(err);
  return s;
}

std::vector<Slice> hlm_slices(const HlmDataset& data, const HlmHypers& center, std::size_t points_per_slice) {
  auto out = prepare(center, points_per_slice);
  const std::size_t total = out.size() * points_per_slice;
  std::exception_ptr err;
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t k = 0; k < static_cast<std::ptrdiff_t>(total); ++k) {
    const auto uk = static_cast<std::size_t>(k);
    try {
      eval_point(data, center, out[uk / points_per_slice], uk % points_per_slice);
    } catch (...) {
#pragma omp critical
      if (!err) err = std::current_exception();
    }
  }
  if (err) std::rethrow_exception(err);
  return out;
}

std::string slices_to_csv(const std::vector<Slice>& slices) {
  std::string out = "hyper,grid_value,log_bf\n";
  for (const auto& s : slices)
    for (std::size_t i = 0; i < s.grid.size(); ++i)
      out += s.hyper + "," + csv::format(s.grid[i]) + "," + (s.skipped[i] ? "NA" : csv::format(s.log_bf[i])) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Mixed model (ML, profiled over β and σ²)

namespace {

Eigen::MatrixXd factor_from(const Eigen::VectorXd& theta, int q) {
  Eigen::MatrixXd l = Eigen::MatrixXd::Zero(q, q);
  if (q == 1) {
    l(0, 0) = theta(0);
  } else {
    l(0, 0) = theta(0);
    l(1, 0) = theta(1);
    l(1, 1) = theta(2);
  }
  return l;
}

struct Profile {
  double deviance;
  Eigen::VectorXd beta;
  double sigma_sq;
};

Profile profile(const HlmDataset& data, HlmModel model, const Eigen::VectorXd& theta) {
  const int p = dimension(model);
  const Eigen::MatrixXd l = factor_from(theta, p);
  Eigen::MatrixXd xvx = Eigen::MatrixXd::Zero(p, p);
  Eigen::VectorXd xvy = Eigen::VectorXd::Zero(p);
  double yvy = 0.0, logdet = 0.0;
  for (const auto& st : data.stats()) {
    Eigen::MatrixXd g = Eigen::MatrixXd::Zero(p, p);
    Eigen::VectorXd c(p);
    g(0, 0) = st.n;
    c(0) = st.sum_y;
    if (p == 2) {
      g(1, 1) = st.sum_ss;
      c(1) = st.sum_sy;
    }
    // V = I + X L Lᵀ Xᵀ; Woodbury with M = I + Lᵀ G L
    const Eigen::MatrixXd gl = g * l;
    const Eigen::MatrixXd mm = Eigen::MatrixXd::Identity(p, p) + l.transpose() * gl;
    const Eigen::LLT<Eigen::MatrixXd> llt(mm);
    logdet += 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    const Eigen::VectorXd ltc = l.transpose() * c;
    xvx += g - gl * llt.solve(gl.transpose());
    xvy += c - gl * llt.solve(ltc);
    yvy += st.sum_yy - ltc.dot(llt.solve(ltc));
  }
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(xvx);
  Profile out;
  out.beta = ldlt.solve(xvy);
  const double nn = static_cast<double>(data.total());
  const double r2 = std::max(yvy - out.beta.dot(xvy), 1e-300);
  out.sigma_sq = r2 / nn;
  out.deviance = logdet + nn * (1.0 + std::log(2.0 * std::numbers::pi * out.sigma_sq));
  return out;
}

// Plain Nelder-Mead with the standard coefficients.
Eigen::VectorXd nelder_mead(const std::function<double(const Eigen::VectorXd&)>& f, Eigen::VectorXd x0,
                            double step, int max_iter, double tol) {
  const Eigen::Index n = x0.size();
  std::vector<Eigen::VectorXd> pts(static_cast<std::size_t>(n + 1), x0);
  std::vector<double> val(static_cast<std::size_t>(n + 1));
  for (Eigen::Index i = 0; i < n; ++i) pts[static_cast<std::size_t>(i + 1)](i) += step;
  for (std::size_t i = 0; i < pts.size(); ++i) val[i] = f(pts[i]);
  std::vector<std::size_t> order(pts.size());
  for (int it = 0; it < max_iter; ++it) {
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return val[a] < val[b]; });
    const std::size_t best = order.front(), worst = order.back(), second = order[order.size() - 2];
    if (std::abs(val[worst] - val[best]) < tol * (1.0 + std::abs(val[best]))) break;
    Eigen::VectorXd centroid = Eigen::VectorXd::Zero(n);
    for (std::size_t i = 0; i + 1 < order.size(); ++i) centroid += pts[order[i]];
    centroid /= static_cast<double>(n);
    const Eigen::VectorXd xr = centroid + (centroid - pts[worst]);
    const double fr = f(xr);
    if (fr < val[best]) {
      const Eigen::VectorXd xe = centroid + 2.0 * (centroid - pts[worst]);
      const double fe = f(xe);
      if (fe < fr) pts[worst] = xe, val[worst] = fe;
      else pts[worst] = xr, val[worst] = fr;
    } else if (fr < val[second]) {
      pts[worst] = xr, val[worst] = fr;
    } else {
      const bool outside = fr < val[worst];
      const Eigen::VectorXd xc = outside ? Eigen::VectorXd(centroid + 0.5 * (xr - centroid))
                                         : Eigen::VectorXd(centroid + 0.5 * (pts[worst] - centroid));
      const double fc = f(xc);
      if (fc < std::min(fr, val[worst])) {
        pts[worst] = xc, val[worst] = fc;
      } else {
        for (std::size_t i = 0; i < pts.size(); ++i) {
          if (i == best) continue;
          pts[i] = pts[best] + 0.5 * (pts[i] - pts[best]);
          val[i] = f(pts[i]);
        }
      }
    }
  }
  const auto best = static_cast<std::size_t>(std::min_element(val.begin(), val.end()) - val.begin());
  return pts[best];
}

}  // namespace

double mixed_model_deviance(const HlmDataset& data, HlmModel model, const Eigen::VectorXd& theta) {
  const int p = dimension(model);
  if (theta.size() != (p == 2 ? 3 : 1)) throw Error(Errc::invalid_argument, "theta has wrong length", "theta");
  return profile(data, model, theta).deviance;
}

MixedModelFit fit_mixed_model(const HlmDataset& data, HlmModel model) {
  const int p = dimension(model);
  if (p == 2) (void)aggregate<2>(data);
  const Eigen::Index nt = p == 2 ? 3 : 1;
  auto dev = [&](const Eigen::VectorXd& t) {
    const double d = profile(data, model, t).deviance;
    return std::isfinite(d) ? d : std::numeric_limits<double>::max();
  };
  Eigen::VectorXd best;
  double best_dev = std::numeric_limits<double>::infinity();
  for (double s0 : {0.1, 0.5, 2.0}) {
    Eigen::VectorXd x = Eigen::VectorXd::Zero(nt);
    x(0) = s0;
    if (p == 2) x(2) = s0;
    // restart from the result so the simplex can escape early collapse
    for (int round = 0; round < 4; ++round) x = nelder_mead(dev, x, 0.1 * std::max(1.0, x.norm()), 2000, 1e-12);
    const double d = dev(x);
    if (d < best_dev) best_dev = d, best = x;
  }
  const Profile pr = profile(data, model, best);
  MixedModelFit fit;
  fit.beta = pr.beta;
  fit.sigma_sq = pr.sigma_sq;
  const Eigen::MatrixXd l = factor_from(best, p);
  fit.psi = pr.sigma_sq * l * l.transpose();
  fit.log_lik = -0.5 * pr.deviance;
  fit.n_params = p + p * (p + 1) / 2 + 1;
  fit.bic = pr.deviance + fit.n_params * std::log(static_cast<double>(data.total()));
  return fit;
}

}  // namespace bfsurf::hlm

namespace bfsurf::reference {

std::vector<hlm::Slice> hlm_slices(const hlm::HlmDataset& data, const hlm::HlmHypers& center,
                                   std::size_t points_per_slice) {
  auto out = hlm::prepare(center, points_per_slice);
  for (auto& s : out)
    for (std::size_t i = 0; i < s.grid.size(); ++i) hlm::eval_point(data, center, s, i);
  return out;
}

}  // namespace bfsurf::reference
