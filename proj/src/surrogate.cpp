#include "bfsurf/surrogate.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numbers>

#include <boost/math/distributions/normal.hpp>
#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>
#include <json.hpp>

#include "bfsurf/csv.hpp"
#include "bfsurf/numerics.hpp"
#include "bfsurf/rng.hpp"

namespace bfsurf::surrogate {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
const double kSqrt5 = std::sqrt(5.0);
}  // namespace

std::string_view to_string(KernelFamily f) {
  return f == KernelFamily::squared_exponential ? "squared_exponential" : "matern_5_2";
}

KernelFamily kernel_from_string(std::string_view s) {
  if (s == "squared_exponential" || s == "se") return KernelFamily::squared_exponential;
  if (s == "matern_5_2" || s == "matern52") return KernelFamily::matern_5_2;
  throw Error(Errc::invalid_argument, "unknown kernel family: " + std::string(s), "kernel");
}

void KernelSpec::validate() const {
  if (lengthscales.size() == 0 || !(lengthscales.array() > 0.0).all() || !lengthscales.allFinite())
    throw Error(Errc::invalid_argument, "lengthscales must be positive", "lengthscales");
  if (!(signal_var > 0.0) || !std::isfinite(signal_var))
    throw Error(Errc::invalid_argument, "signal variance must be positive", "signal_var");
}

namespace {

// Correlation as a function of the scaled distance r (r² for SE).
inline double corr(KernelFamily f, double r2) {
  if (f == KernelFamily::squared_exponential) return std::exp(-0.5 * r2);
  const double r = std::sqrt(r2);
  return (1.0 + kSqrt5 * r + 5.0 / 3.0 * r2) * std::exp(-kSqrt5 * r);
}

// d corr / d log ℓ_k = slope(r) · Δ_k²/ℓ_k²
inline double corr_slope(KernelFamily f, double r2) {
  if (f == KernelFamily::squared_exponential) return std::exp(-0.5 * r2);
  const double r = std::sqrt(r2);
  return 5.0 / 3.0 * (1.0 + kSqrt5 * r) * std::exp(-kSqrt5 * r);
}

}  // namespace

double kernel(const KernelSpec& k, const Eigen::Ref<const Eigen::VectorXd>& a, const Eigen::Ref<const Eigen::VectorXd>& b) {
  const double r2 = ((a - b).array() / k.lengthscales.array()).square().sum();
  return k.signal_var * corr(k.family, r2);
}

Eigen::MatrixXd cross_cov(const KernelSpec& k, const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.cols() != k.lengthscales.size() || b.cols() != k.lengthscales.size())
    throw Error(Errc::invalid_argument, "input dimension does not match kernel");
  const Eigen::MatrixXd as = a.array().rowwise() / k.lengthscales.transpose().array();
  const Eigen::MatrixXd bs = b.array().rowwise() / k.lengthscales.transpose().array();
  Eigen::MatrixXd out(a.rows(), b.rows());
  for (Eigen::Index j = 0; j < b.rows(); ++j)
    for (Eigen::Index i = 0; i < a.rows(); ++i) out(i, j) = k.signal_var * corr(k.family, (as.row(i) - bs.row(j)).squaredNorm());
  return out;
}

// ---------------------------------------------------------------------------
// Training data

TrainingSet::TrainingSet(Eigen::MatrixXd x, Eigen::VectorXd y) : x_(std::move(x)), y_(std::move(y)) {
  if (x_.rows() != y_.size()) throw Error(Errc::invalid_argument, "X and y row counts differ", "y");
  if (x_.rows() == 0 || x_.cols() == 0) throw Error(Errc::invalid_argument, "training set is empty", "X");
  if (!x_.allFinite() || !y_.allFinite()) throw Error(Errc::invalid_argument, "training data must be finite");
  constexpr double tol = 1e-9;
  if ((x_.array() < -tol).any() || (x_.array() > 1.0 + tol).any())
    throw Error(Errc::invalid_argument, "training inputs must lie in the unit cube", "X");

  std::map<std::vector<double>, int> seen;
  std::vector<std::vector<double>> rows;
  std::vector<std::vector<double>> vals;
  loc_.resize(static_cast<std::size_t>(x_.rows()));
  for (Eigen::Index i = 0; i < x_.rows(); ++i) {
    std::vector<double> key(static_cast<std::size_t>(x_.cols()));
    for (Eigen::Index c = 0; c < x_.cols(); ++c) key[static_cast<std::size_t>(c)] = x_(i, c);
    auto [it, fresh] = seen.try_emplace(key, static_cast<int>(rows.size()));
    if (fresh) {
      rows.push_back(key);
      vals.emplace_back();
    }
    loc_[static_cast<std::size_t>(i)] = it->second;
    vals[static_cast<std::size_t>(it->second)].push_back(y_(i));
  }
  const auto m = static_cast<Eigen::Index>(rows.size());
  ux_.resize(m, x_.cols());
  means_.resize(m);
  vars_.resize(m);
  counts_.resize(rows.size());
  for (Eigen::Index j = 0; j < m; ++j) {
    const auto& v = vals[static_cast<std::size_t>(j)];
    for (Eigen::Index c = 0; c < x_.cols(); ++c) ux_(j, c) = rows[static_cast<std::size_t>(j)][static_cast<std::size_t>(c)];
    counts_[static_cast<std::size_t>(j)] = static_cast<int>(v.size());
    double mean = 0.0;
    for (double e : v) mean += e;
    mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double e : v) ss += (e - mean) * (e - mean);
    means_(j) = mean;
    vars_(j) = v.size() > 1 ? ss / static_cast<double>(v.size() - 1) : 0.0;
  }
}

TrainingSet TrainingSet::subset(const std::vector<std::size_t>& rows) const {
  Eigen::MatrixXd x(static_cast<Eigen::Index>(rows.size()), x_.cols());
  Eigen::VectorXd y(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= size()) throw Error(Errc::invalid_argument, "subset row out of range");
    x.row(static_cast<Eigen::Index>(i)) = x_.row(static_cast<Eigen::Index>(rows[i]));
    y(static_cast<Eigen::Index>(i)) = y_(static_cast<Eigen::Index>(rows[i]));
  }
  return TrainingSet(std::move(x), std::move(y));
}

// ---------------------------------------------------------------------------
// Likelihood

double gp_log_likelihood(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const Eigen::VectorXd& known_noise,
                         const GpParams& p, Eigen::VectorXd* grad) {
  const Eigen::Index n = x.rows(), d = x.cols();
  if (p.log_lengthscales.size() != d) throw Error(Errc::invalid_argument, "lengthscale count does not match inputs");
  if (known_noise.size() != n || y.size() != n) throw Error(Errc::invalid_argument, "noise/y length mismatch");
  const Eigen::ArrayXd ell = p.log_lengthscales.array().exp();
  const double sv = std::exp(p.log_signal_var), nug = std::exp(p.log_nugget);
  const Eigen::MatrixXd xs = x.array().rowwise() / ell.transpose();

  Eigen::MatrixXd r2(n, n);
  Eigen::MatrixXd k(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    k(j, j) = sv + nug + known_noise(j);
    r2(j, j) = 0.0;
    for (Eigen::Index i = j + 1; i < n; ++i) {
      r2(i, j) = r2(j, i) = (xs.row(i) - xs.row(j)).squaredNorm();
      k(i, j) = k(j, i) = sv * corr(p.family, r2(i, j));
    }
  }
  const numerics::SpdFactor fac(k);
  const Eigen::VectorXd ones = Eigen::VectorXd::Ones(n);
  const Eigen::VectorXd ki1 = fac.solve(ones), kiy = fac.solve(y);
  const double mu = ones.dot(kiy) / ones.dot(ki1);
  const Eigen::VectorXd alpha = kiy - mu * ki1;
  const Eigen::VectorXd resid = y.array() - mu;
  const double ll = -0.5 * resid.dot(alpha) - 0.5 * fac.logdet() - 0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);

  if (grad) {
    // ∂L/∂θ = ½ tr((ααᵀ - K⁻¹) ∂K/∂θ); the GLS mean drops out (envelope)
    const Eigen::MatrixXd w = alpha * alpha.transpose() - fac.inverse();
    grad->setZero(d + 2);
    double g_sv = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      g_sv += 0.5 * w(j, j) * sv;
      for (Eigen::Index i = j + 1; i < n; ++i) {
        const double wij = w(i, j);  // off-diagonal pairs count twice
        g_sv += wij * k(i, j);
        const double s = wij * sv * corr_slope(p.family, r2(i, j));
        for (Eigen::Index c = 0; c < d; ++c) {
          const double dx = xs(i, c) - xs(j, c);
          (*grad)(c) += s * dx * dx;
        }
      }
    }
    (*grad)(d) = g_sv;
    (*grad)(d + 1) = 0.5 * nug * w.diagonal().sum();
  }
  return ll;
}

// ---------------------------------------------------------------------------
// Fitted core

Eigen::MatrixXd GpCore::covariance() const {
  Eigen::MatrixXd k = cross_cov(kernel, x, x);
  k.diagonal().array() += nugget + known.array();
  return k;
}

void GpCore::rebuild() {
  kernel.validate();
  Eigen::MatrixXd k = covariance();
  const double mean_diag = k.diagonal().mean();
  for (double rel : {0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6}) {
    Eigen::MatrixXd kj = k;
    kj.diagonal().array() += rel * mean_diag;
    llt.compute(kj);
    if (llt.info() == Eigen::Success && (llt.matrixLLT().diagonal().array() > 0.0).all()) break;
  }
  if (llt.info() != Eigen::Success) throw Error(Errc::not_positive_definite, "GP covariance is not positive definite");
  const Eigen::VectorXd ones = Eigen::VectorXd::Ones(x.rows());
  const Eigen::VectorXd ki1 = llt.solve(ones), kiy = llt.solve(y);
  mean = ones.dot(kiy) / ones.dot(ki1);
  alpha = kiy - mean * ki1;
}

void GpCore::predict(const Eigen::MatrixXd& xnew, Eigen::VectorXd& out_mean, Eigen::VectorXd& out_var) const {
  if (xnew.rows() == 0) {
    out_mean.resize(0);
    out_var.resize(0);
    return;
  }
  const Eigen::MatrixXd ks = cross_cov(kernel, xnew, x);  // n* × n
  out_mean = (ks * alpha).array() + mean;
  const Eigen::MatrixXd v = llt.matrixL().solve(ks.transpose());
  out_var = (kernel.signal_var - v.colwise().squaredNorm().transpose().array()).max(0.0);
  out_mean = out_mean.array() * y_scale + y_center;
  out_var *= y_scale * y_scale;
}

// ---------------------------------------------------------------------------
// Optimization

namespace {

struct OptResult {
  Eigen::VectorXd x;
  double f = kInf;
  int iterations = 0;
  double pg_norm = kInf;
  bool converged = false;
};

using Objective = std::function<double(const Eigen::VectorXd&, Eigen::VectorXd*)>;

Eigen::VectorXd projected(const Eigen::VectorXd& x, const Eigen::VectorXd& g, const Eigen::VectorXd& lo,
                          const Eigen::VectorXd& hi) {
  Eigen::VectorXd pg = g;
  for (Eigen::Index i = 0; i < x.size(); ++i)
    if ((x(i) <= lo(i) && g(i) > 0.0) || (x(i) >= hi(i) && g(i) < 0.0)) pg(i) = 0.0;
  return pg;
}

// Minimizes f within box bounds: BFGS on the free variables, projection onto
// the box, Armijo backtracking.
OptResult projected_bfgs(const Objective& f, Eigen::VectorXd x, const Eigen::VectorXd& lo, const Eigen::VectorXd& hi,
                         int max_iter, double tol) {
  const Eigen::Index n = x.size();
  x = x.cwiseMax(lo).cwiseMin(hi);
  OptResult res;
  Eigen::VectorXd g(n), gn(n);
  double fx;
  try {
    fx = f(x, &g);
  } catch (const Error&) {
    fx = kInf;
  }
  res.x = x;
  res.f = fx;
  if (!std::isfinite(fx) || !g.allFinite()) return res;
  Eigen::MatrixXd h = Eigen::MatrixXd::Identity(n, n);
  bool h_is_identity = true;
  int it = 0;
  for (; it < max_iter; ++it) {
    const Eigen::VectorXd pg = projected(x, g, lo, hi);
    if (pg.lpNorm<Eigen::Infinity>() < tol) {
      res.converged = true;
      break;
    }
    Eigen::VectorXd dir = -(h * pg);
    for (Eigen::Index i = 0; i < n; ++i)
      if (pg(i) == 0.0) dir(i) = 0.0;
    if (!(dir.dot(g) < 0.0)) {
      h.setIdentity();
      h_is_identity = true;
      dir = -pg;
    }
    double t = std::min(1.0, 2.0 / dir.lpNorm<Eigen::Infinity>());
    bool accepted = false;
    Eigen::VectorXd xn;
    double fn = kInf;
    for (int ls = 0; ls < 60; ++ls) {
      xn = (x + t * dir).cwiseMax(lo).cwiseMin(hi);
      try {
        fn = f(xn, &gn);
      } catch (const Error&) {
        fn = kInf;
      }
      if (std::isfinite(fn) && gn.allFinite() && fn <= fx + 1e-4 * g.dot(xn - x)) {
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    if (!accepted || (xn - x).lpNorm<Eigen::Infinity>() == 0.0) {
      if (h_is_identity) break;
      h.setIdentity();
      h_is_identity = true;
      continue;
    }
    const Eigen::VectorXd s = xn - x, yv = gn - g;
    const double sy = s.dot(yv);
    if (sy > 1e-10 * s.norm() * yv.norm()) {
      if (h_is_identity) h *= sy / yv.squaredNorm();
      const double rho = 1.0 / sy;
      const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(n, n);
      h = (eye - rho * s * yv.transpose()) * h * (eye - rho * yv * s.transpose()) + rho * s * s.transpose();
      h_is_identity = false;
    }
    x = xn;
    fx = fn;
    g = gn;
  }
  res.x = x;
  res.f = fx;
  res.iterations = it;
  res.pg_norm = projected(x, g, lo, hi).lpNorm<Eigen::Infinity>();
  res.converged = res.converged || res.pg_norm < tol;
  return res;
}

struct Standardized {
  Eigen::VectorXd y;
  double center = 0.0, scale = 1.0;
};

Standardized standardize(const Eigen::VectorXd& y) {
  Standardized s;
  s.center = y.mean();
  const double var = y.size() > 1 ? (y.array() - s.center).square().sum() / static_cast<double>(y.size() - 1) : 0.0;
  s.scale = var > 1e-24 * std::max(1.0, s.center * s.center) ? std::sqrt(var) : 1.0;
  s.y = (y.array() - s.center) / s.scale;
  return s;
}

struct CoreResult {
  GpCore core;
  FitDiagnostics diag;
};

// Multi-start ML fit of a constant-mean GP. `known` is extra per-point noise
// in raw output units.
CoreResult fit_core(const Eigen::MatrixXd& x, const Eigen::VectorXd& y_raw, const Eigen::VectorXd& known_raw,
                    Nugget nugget, const FitOptions& opt) {
  const Eigen::Index d = x.cols();
  if (opt.starts < 1) throw Error(Errc::invalid_argument, "need at least one start", "starts");
  const Standardized st = standardize(y_raw);
  const Eigen::VectorXd known = known_raw / (st.scale * st.scale);
  const bool est = nugget.estimate;
  const double fixed_nug = std::max(nugget.value, kNoiseFloor);
  const Eigen::Index np = d + 1 + (est ? 1 : 0);

  Eigen::VectorXd lo(np), hi(np);
  lo.head(d).setConstant(std::log(kLengthscaleMin));
  hi.head(d).setConstant(std::log(kLengthscaleMax));
  lo(d) = std::log(kSignalVarMin);
  hi(d) = std::log(kSignalVarMax);
  if (est) {
    lo(d + 1) = std::log(kNoiseFloor);
    hi(d + 1) = std::log(kNuggetMax);
  }

  auto unpack = [&](const Eigen::VectorXd& t) {
    GpParams p;
    p.family = opt.family;
    p.log_lengthscales = t.head(d);
    p.log_signal_var = t(d);
    p.log_nugget = est ? t(d + 1) : std::log(fixed_nug);
    return p;
  };
  const Objective negll = [&](const Eigen::VectorXd& t, Eigen::VectorXd* g) {
    Eigen::VectorXd full;
    const double ll = gp_log_likelihood(x, st.y, known, unpack(t), g ? &full : nullptr);
    if (g) *g = -full.head(np);
    return -ll;
  };

  std::vector<Eigen::VectorXd> inits(static_cast<std::size_t>(opt.starts));
  for (int s = 0; s < opt.starts; ++s) {
    Eigen::VectorXd t(np);
    if (s == 0) {
      t.head(d).setConstant(std::log(0.3));
      t(d) = 0.0;
      if (est) t(d + 1) = std::log(1e-2);
    } else {
      CounterRng rng(stream_key(opt.seed, 0x6F, static_cast<std::uint64_t>(s)));
      auto log_uniform = [&](double a, double b) { return std::log(a) + rng.uniform() * (std::log(b) - std::log(a)); };
      for (Eigen::Index c = 0; c < d; ++c) t(c) = log_uniform(0.05, 3.0);
      t(d) = log_uniform(0.1, 10.0);
      if (est) t(d + 1) = log_uniform(1e-6, 0.3);
    }
    inits[static_cast<std::size_t>(s)] = t;
  }

  std::vector<OptResult> results(inits.size());
  std::vector<double> start_ll(inits.size(), -kInf);
#pragma omp parallel for schedule(dynamic)
  for (int s = 0; s < opt.starts; ++s) {
    const auto us = static_cast<std::size_t>(s);
    try {
      start_ll[us] = -negll(inits[us], nullptr);
    } catch (const Error&) {
    }
    results[us] = projected_bfgs(negll, inits[us], lo, hi, opt.max_iter, opt.grad_tol);
  }

  CoreResult out;
  std::size_t best = 0;
  for (std::size_t s = 0; s < results.size(); ++s) {
    out.diag.final_log_lik.push_back(-results[s].f);
    if (results[s].converged) ++out.diag.starts_converged;
    if (results[s].f < results[best].f) best = s;  // strict: ties to the lowest start
  }
  out.diag.start_log_lik = start_ll;
  out.diag.best_start = static_cast<int>(best);
  out.diag.iterations = results[best].iterations;
  out.diag.grad_norm = results[best].pg_norm;
  out.diag.converged = out.diag.starts_converged > 0;

  const GpParams p = unpack(results[best].x);
  GpCore& c = out.core;
  c.kernel.family = opt.family;
  c.kernel.lengthscales = p.log_lengthscales.array().exp();
  c.kernel.signal_var = std::exp(p.log_signal_var);
  c.nugget = std::exp(p.log_nugget);
  c.y_center = st.center;
  c.y_scale = st.scale;
  c.x = x;
  c.y = st.y;
  c.known = known;
  c.log_lik = -results[best].f;
  if (std::isfinite(c.log_lik)) c.rebuild();
  return out;
}

HetGpFit wrap_homoskedastic(CoreResult&& r, const TrainingSet& train) {
  HetGpFit fit;
  fit.mean_gp = std::move(r.core);
  fit.diagnostics = std::move(r.diag);
  fit.counts = train.counts();
  const double noise = fit.mean_gp.nugget * fit.mean_gp.y_scale * fit.mean_gp.y_scale;
  fit.noise = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(train.counts().size()), noise);
  return fit;
}

void require_converged(const HetGpFit& fit, const char* what) {
  if (!fit.diagnostics.converged)
    throw FitFailed(std::string("fit failed: no start of the ") + what + " converged (best |grad| = " +
                        std::to_string(fit.diagnostics.grad_norm) + ")",
                    fit);
}

}  // namespace

Eigen::VectorXd HetGpFit::noise_at(const Eigen::MatrixXd& xnew) const {
  const double floor = kNoiseFloor * mean_gp.y_scale * mean_gp.y_scale;
  if (!noise_gp) return Eigen::VectorXd::Constant(xnew.rows(), std::max(mean_gp.nugget * mean_gp.y_scale * mean_gp.y_scale, floor));
  Eigen::VectorXd m, v;
  noise_gp->predict(xnew, m, v);
  return m.array().exp().max(floor);
}

HetGpFit fit_gp(const TrainingSet& train, Nugget nugget, const FitOptions& opt) {
  if (train.unique_x().rows() < static_cast<Eigen::Index>(train.dim() + 2))
    throw Error(Errc::insufficient_sample, "GP fit needs at least d + 2 unique locations", "X");
  auto fit = wrap_homoskedastic(
      fit_core(train.x(), train.y(), Eigen::VectorXd::Zero(train.x().rows()), nugget, opt), train);
  require_converged(fit, "GP");
  return fit;
}

HetGpFit fit_hetgp(const TrainingSet& train, const FitOptions& opt) {
  const auto& counts = train.counts();
  const auto m = static_cast<Eigen::Index>(counts.size());
  const int replicated = static_cast<int>(std::count_if(counts.begin(), counts.end(), [](int c) { return c >= 2; }));
  if (replicated < 5) {
    auto fit = fit_gp(train, Nugget::estimated(), opt);
    fit.diagnostics.fallback = true;
    return fit;
  }
  if (m < static_cast<Eigen::Index>(train.dim() + 2))
    throw Error(Errc::insufficient_sample, "GP fit needs at least d + 2 unique locations", "X");

  const Eigen::MatrixXd& ux = train.unique_x();
  const Eigen::VectorXd& ybar = train.means();
  const Standardized all = standardize(train.y());
  const double floor = kNoiseFloor * all.scale * all.scale;

  // log s² is biased by ψ(k/2) - log(k/2) and has variance ψ'(k/2) for k dof
  auto bias = [](double k) { return boost::math::digamma(k / 2.0) - std::log(k / 2.0); };
  auto spread = [](double k) { return boost::math::trigamma(k / 2.0); };

  std::vector<Eigen::Index> rep_rows;
  for (Eigen::Index i = 0; i < m; ++i)
    if (counts[static_cast<std::size_t>(i)] >= 2) rep_rows.push_back(i);
  Eigen::MatrixXd xr(static_cast<Eigen::Index>(rep_rows.size()), ux.cols());
  Eigen::VectorXd tr(xr.rows()), kr(xr.rows());
  for (Eigen::Index r = 0; r < xr.rows(); ++r) {
    const Eigen::Index i = rep_rows[static_cast<std::size_t>(r)];
    const double k = counts[static_cast<std::size_t>(i)] - 1.0;
    xr.row(r) = ux.row(i);
    tr(r) = std::log(std::max(train.variances()(i), floor)) - bias(k);
    kr(r) = spread(k);
  }

  HetGpFit fit;
  fit.counts = counts;
  const Eigen::VectorXd nvec = Eigen::Map<const Eigen::VectorXi>(counts.data(), m).cast<double>();
  for (int pass = 0; pass < 2; ++pass) {
    CoreResult smooth = pass == 0 ? fit_core(xr, tr, kr, Nugget::estimated(), opt) : [&] {
      // second pass: residual variance about the current mean surface, n_i dof
      Eigen::VectorXd mu, var;
      fit.mean_gp.predict(ux, mu, var);
      Eigen::VectorXd t(m), kn(m);
      for (Eigen::Index i = 0; i < m; ++i) {
        const double n = nvec(i);
        const double ss = (n - 1.0) * train.variances()(i) + n * (ybar(i) - mu(i)) * (ybar(i) - mu(i));
        t(i) = std::log(std::max(ss / n, floor)) - bias(n);
        kn(i) = spread(n);
      }
      return fit_core(ux, t, kn, Nugget::estimated(), opt);
    }();
    fit.noise_gp = std::move(smooth.core);
    if (!smooth.diag.converged) {
      fit.diagnostics = smooth.diag;
      throw FitFailed("fit failed: noise smoother did not converge", fit);
    }
    fit.noise = fit.noise_at(ux);
    // noise floor is relative to the raw output variance
    fit.noise = fit.noise.cwiseMax(floor);
    CoreResult mean = fit_core(ux, ybar, fit.noise.cwiseQuotient(nvec), Nugget::fixed(kNoiseFloor), opt);
    fit.mean_gp = std::move(mean.core);
    fit.diagnostics = std::move(mean.diag);
  }
  require_converged(fit, "mean GP");
  return fit;
}

// ---------------------------------------------------------------------------
// Prediction

Prediction predict(const HetGpFit& fit, const Eigen::MatrixXd& xnew) {
  Prediction p;
  if (xnew.rows() == 0) {
    p.mean.resize(0);
    p.var_mean.resize(0);
    p.var_obs.resize(0);
    return p;
  }
  if (xnew.cols() != fit.mean_gp.x.cols()) throw Error(Errc::invalid_argument, "prediction input has wrong dimension", "X");
  fit.mean_gp.predict(xnew, p.mean, p.var_mean);
  p.var_obs = p.var_mean + fit.noise_at(xnew);
  p.extrapolated.resize(static_cast<std::size_t>(xnew.rows()));
  for (Eigen::Index i = 0; i < xnew.rows(); ++i)
    p.extrapolated[static_cast<std::size_t>(i)] = (xnew.row(i).array() < 0.0).any() || (xnew.row(i).array() > 1.0).any();
  return p;
}

std::pair<Eigen::VectorXd, Eigen::VectorXd> Prediction::interval(double level, bool observation) const {
  if (!(level > 0.0 && level < 1.0)) throw Error(Errc::invalid_argument, "level must lie in (0, 1)", "level");
  const double z = boost::math::quantile(boost::math::normal(), 0.5 + 0.5 * level);
  const Eigen::VectorXd sd = (observation ? var_obs : var_mean).array().sqrt();
  return {mean - z * sd, mean + z * sd};
}

double coverage(const HetGpFit& fit, const TrainingSet& holdout, double level) {
  if (holdout.size() == 0) throw Error(Errc::invalid_argument, "holdout is empty", "holdout");
  const Prediction p = predict(fit, holdout.x());
  const auto [lo, hi] = p.interval(level);
  std::size_t inside = 0;
  for (Eigen::Index i = 0; i < holdout.y().size(); ++i) inside += holdout.y()(i) >= lo(i) && holdout.y()(i) <= hi(i);
  return static_cast<double>(inside) / static_cast<double>(holdout.size());
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

nlohmann::json vec_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Eigen::VectorXd json_vec(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

nlohmann::json core_json(const GpCore& c) {
  nlohmann::json j;
  j["kernel"] = {{"family", to_string(c.kernel.family)},
                 {"lengthscales", vec_json(c.kernel.lengthscales)},
                 {"signal_var", c.kernel.signal_var}};
  j["mean"] = c.mean;
  j["nugget"] = c.nugget;
  j["y_center"] = c.y_center;
  j["y_scale"] = c.y_scale;
  j["log_lik"] = c.log_lik;
  j["x"] = nlohmann::json::array();
  for (Eigen::Index i = 0; i < c.x.rows(); ++i) j["x"].push_back(vec_json(c.x.row(i).transpose()));
  j["y"] = vec_json(c.y);
  j["known"] = vec_json(c.known);
  return j;
}

GpCore json_core(const nlohmann::json& j) {
  GpCore c;
  c.kernel.family = kernel_from_string(j.at("kernel").at("family").get<std::string>());
  c.kernel.lengthscales = json_vec(j.at("kernel").at("lengthscales"));
  c.kernel.signal_var = j.at("kernel").at("signal_var").get<double>();
  c.nugget = j.at("nugget").get<double>();
  c.y_center = j.at("y_center").get<double>();
  c.y_scale = j.at("y_scale").get<double>();
  c.log_lik = j.value("log_lik", 0.0);
  const auto& xs = j.at("x");
  c.x.resize(static_cast<Eigen::Index>(xs.size()), c.kernel.lengthscales.size());
  for (std::size_t i = 0; i < xs.size(); ++i) c.x.row(static_cast<Eigen::Index>(i)) = json_vec(xs[i]).transpose();
  c.y = json_vec(j.at("y"));
  c.known = json_vec(j.at("known"));
  if (c.y.size() != c.x.rows() || c.known.size() != c.x.rows())
    throw Error(Errc::parse_error, "GP JSON: x, y and known lengths differ");
  c.rebuild();
  return c;
}

}  // namespace

std::string to_json(const HetGpFit& fit) {
  nlohmann::json j;
  j["heteroskedastic"] = fit.heteroskedastic();
  j["mean_gp"] = core_json(fit.mean_gp);
  j["noise_gp"] = fit.noise_gp ? core_json(*fit.noise_gp) : nlohmann::json(nullptr);
  j["noise"] = vec_json(fit.noise);
  j["counts"] = fit.counts;
  const auto& d = fit.diagnostics;
  j["diagnostics"] = {{"converged", d.converged},         {"starts_converged", d.starts_converged},
                      {"best_start", d.best_start},       {"iterations", d.iterations},
                      {"grad_norm", d.grad_norm},         {"start_log_lik", d.start_log_lik},
                      {"final_log_lik", d.final_log_lik}, {"fallback", d.fallback}};
  // nlohmann writes non-finite numbers as null; keep the summary readable
  if (!std::isfinite(d.grad_norm)) j["diagnostics"]["grad_norm"] = nullptr;
  return j.dump();
}

HetGpFit fit_from_json(std::string_view text) {
  try {
    const auto j = nlohmann::json::parse(text);
    HetGpFit fit;
    fit.mean_gp = json_core(j.at("mean_gp"));
    if (!j.at("noise_gp").is_null()) fit.noise_gp = json_core(j.at("noise_gp"));
    fit.noise = json_vec(j.at("noise"));
    fit.counts = j.at("counts").get<std::vector<int>>();
    if (j.contains("diagnostics")) {
      const auto& d = j["diagnostics"];
      fit.diagnostics.converged = d.value("converged", false);
      fit.diagnostics.starts_converged = d.value("starts_converged", 0);
      fit.diagnostics.best_start = d.value("best_start", 0);
      fit.diagnostics.iterations = d.value("iterations", 0);
      fit.diagnostics.grad_norm = d["grad_norm"].is_number() ? d["grad_norm"].get<double>() : kInf;
      fit.diagnostics.fallback = d.value("fallback", false);
      for (const auto& v : d.value("start_log_lik", nlohmann::json::array()))
        fit.diagnostics.start_log_lik.push_back(v.is_number() ? v.get<double>() : -kInf);
      for (const auto& v : d.value("final_log_lik", nlohmann::json::array()))
        fit.diagnostics.final_log_lik.push_back(v.is_number() ? v.get<double>() : -kInf);
    }
    return fit;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::parse_error, std::string("fit JSON: ") + e.what());
  }
}

std::string predictions_to_csv(const Eigen::MatrixXd& x, const Prediction& p, const std::vector<std::string>& names) {
  if (!names.empty() && static_cast<Eigen::Index>(names.size()) != x.cols())
    throw Error(Errc::invalid_argument, "one column name per input dimension required", "names");
  std::string out;
  for (Eigen::Index c = 0; c < x.cols(); ++c)
    out += (names.empty() ? "x" + std::to_string(c + 1) : names[static_cast<std::size_t>(c)]) + ",";
  out += "mean,sd_mean,sd_obs\n";
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index c = 0; c < x.cols(); ++c) out += csv::format(x(i, c)) + ",";
    out += csv::format(p.mean(i)) + "," + csv::format(std::sqrt(p.var_mean(i))) + "," +
           csv::format(std::sqrt(p.var_obs(i))) + "\n";
  }
  return out;
}

}  // namespace bfsurf::surrogate
