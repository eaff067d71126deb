#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "bfsurf/errors.hpp"
#include "bfsurf/hlm_bf.hpp"
#include "oracles.hpp"

using namespace bfsurf;
using namespace bfsurf::hlm;

namespace {

using oracle::small_hypers;
using oracle::three_groups;
using oracle::two_by_three;

// Profiled ML deviance computed the long way: dense V_j per group.
double dense_deviance(const HlmDataset& d, HlmModel model, const Eigen::MatrixXd& l) {
  const int p = dimension(model);
  const Eigen::MatrixXd psi = l * l.transpose();
  Eigen::MatrixXd xvx = Eigen::MatrixXd::Zero(p, p);
  Eigen::VectorXd xvy = Eigen::VectorXd::Zero(p);
  double logdet = 0.0;
  std::vector<Eigen::MatrixXd> xs, vinv;
  std::vector<Eigen::VectorXd> ys;
  for (const auto& grp : d.groups()) {
    const auto n = static_cast<Eigen::Index>(grp.y.size());
    Eigen::MatrixXd x(n, p);
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      x(i, 0) = 1.0;
      if (p == 2) x(i, 1) = grp.ses[static_cast<std::size_t>(i)];
      y(i) = grp.y[static_cast<std::size_t>(i)];
    }
    const Eigen::MatrixXd v = Eigen::MatrixXd::Identity(n, n) + x * psi * x.transpose();
    const Eigen::MatrixXd vi = v.inverse();
    logdet += std::log(v.determinant());
    xvx += x.transpose() * vi * x;
    xvy += x.transpose() * vi * y;
    xs.push_back(x);
    ys.push_back(y);
    vinv.push_back(vi);
  }
  const Eigen::VectorXd beta = xvx.inverse() * xvy;
  double rss = 0.0;
  for (std::size_t j = 0; j < xs.size(); ++j) {
    const Eigen::VectorXd r = ys[j] - xs[j] * beta;
    rss += r.dot(vinv[j] * r);
  }
  const double nn = static_cast<double>(d.total());
  return logdet + nn * (1.0 + std::log(2.0 * std::numbers::pi * rss / nn));
}

}  // namespace

TEST_CASE("csv loading centers ses within each school") {
  const auto d = two_by_three();
  CHECK(d.m() == 2);
  CHECK(d.total() == 6);
  CHECK(d.groups()[0].id == "A");
  for (const auto& grp : d.groups()) {
    double s = 0.0;
    for (double v : grp.ses) s += v;
    CHECK(std::abs(s) < 1e-12);
  }
  // school order follows first appearance even when rows interleave
  const auto e = load_hlm_csv("school,ses,mathscore\nz,1,2\na,0,1\nz,2,3\na,1,1\n");
  CHECK(e.groups()[0].id == "z");
  CHECK(e.groups()[1].y == std::vector<double>{1, 1});
}

TEST_CASE("csv loading errors") {
  try {
    load_hlm_csv("school,ses,mathscore\nA,1,2\nA,1\n");
    FAIL("expected parse error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::parse_error);
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
  CHECK_THROWS_AS(load_hlm_csv("school,ses,mathscore\nA,1,2\nA,nan,2\n"), Error);
  CHECK_THROWS_AS(load_hlm_csv("school,ses,mathscore\nA,1,2\nA,,2\n"), Error);
  try {
    load_hlm_csv("school,ses,mathscore\nA,1,2\nA,2,2\nB,0,1\n");
    FAIL("expected group too small");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::group_too_small);
    CHECK(std::string(e.what()).find("group too small") != std::string::npos);
  }
  CHECK_THROWS_AS(load_hlm_csv("id,ses,mathscore\nA,1,2\n"), Error);
}

TEST_CASE("csv round trip") {
  const auto d = synthetic_hlm(3, {.m = 5});
  const auto e = load_hlm_csv(to_csv(d));
  REQUIRE(e.m() == 5);
  const auto h = small_hypers();
  CHECK(log_marginal_hlm(e, HlmModel::slopes_and_intercepts, h) ==
        doctest::Approx(log_marginal_hlm(d, HlmModel::slopes_and_intercepts, h)).epsilon(1e-12));
}

TEST_CASE("hypers validation") {
  auto h = small_hypers();
  CHECK_NOTHROW(h.validate());
  h.g = 0;
  CHECK_THROWS_AS(h.validate(), Error);
  h = small_hypers();
  h.lambda0(0, 1) = h.lambda0(1, 0) = 3.0;  // det < 0
  CHECK_THROWS_AS(h.validate(), Error);
  h = small_hypers();
  h.nu0 = -1;
  try {
    h.validate();
  } catch (const Error& e) {
    CHECK(e.field() == "nu0");
  }
}

TEST_CASE("quadrature marginal matches hierarchical Monte Carlo oracle") {
  const auto h = small_hypers();
  std::uint64_t seed = 100;
  for (const auto& d : {two_by_three(), three_groups()}) {
    for (auto model : {HlmModel::slopes_and_intercepts, HlmModel::means_only}) {
      const double q = log_marginal_hlm(d, model, h);
      const auto mc = mc_oracle_log_marginal_hlm(d, model, h, 1'000'000, ++seed);
      CAPTURE(d.m());
      CAPTURE(dimension(model));
      CHECK(std::abs(q - mc.log_marginal) < 3.0 * mc.std_err);
      CHECK(mc.std_err < 0.05);
    }
  }
  // a second hyper point with stronger prior pull and larger g
  const HlmHypers h2 = oracle::small_hypers_2();
  for (auto model : {HlmModel::slopes_and_intercepts, HlmModel::means_only}) {
    const double q = log_marginal_hlm(three_groups(), model, h2);
    const auto mc = mc_oracle_log_marginal_hlm(three_groups(), model, h2, 1'000'000, ++seed);
    CHECK(std::abs(q - mc.log_marginal) < 3.0 * mc.std_err);
  }
}

TEST_CASE("means-only model ignores slope hyperparameters") {
  const auto d = three_groups();
  const auto h = small_hypers();
  const double base = log_marginal_hlm(d, HlmModel::means_only, h);
  auto h2 = h;
  h2.mu0(1) = -40.0;
  h2.lambda0(1, 1) = 90.0;
  h2.lambda0(0, 1) = h2.lambda0(1, 0) = 1.9;
  CHECK(log_marginal_hlm(d, HlmModel::means_only, h2) == base);
}

TEST_CASE("doubling quadrature nodes barely moves the marginal") {
  const auto d = synthetic_hlm(5);
  const auto h = default_hlm_hypers(d);
  const numerics::QuadratureSpec fine{-20, 15, 4001, numerics::Transform::log};
  for (auto model : {HlmModel::slopes_and_intercepts, HlmModel::means_only})
    CHECK(std::abs(log_marginal_hlm(d, model, h, fine) - log_marginal_hlm(d, model, h)) < 1e-6);
  const auto s = small_hypers();
  CHECK(std::abs(log_marginal_hlm(three_groups(), HlmModel::slopes_and_intercepts, s, fine) -
                 log_marginal_hlm(three_groups(), HlmModel::slopes_and_intercepts, s)) < 1e-6);
}

TEST_CASE("constant ses in a school is a degenerate design for slopes") {
  const HlmDataset d({{"ok", {1, 2, 3}, {0, 1, 2}}, {"flat", {1, 2, 4}, {0.7, 0.7, 0.7}}});
  try {
    log_marginal_hlm(d, HlmModel::slopes_and_intercepts, small_hypers());
    FAIL("expected degenerate group design");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::degenerate_group_design);
    CHECK(std::string(e.what()).find("flat") != std::string::npos);
  }
  CHECK(std::isfinite(log_marginal_hlm(d, HlmModel::means_only, small_hypers())));
}

TEST_CASE("marginal is invariant to group and student order") {
  const auto d = three_groups();
  auto groups = d.groups();
  std::reverse(groups.begin(), groups.end());
  std::reverse(groups[0].y.begin(), groups[0].y.end());
  std::reverse(groups[0].ses.begin(), groups[0].ses.end());
  const HlmDataset e(groups);
  const auto h = small_hypers();
  for (auto model : {HlmModel::slopes_and_intercepts, HlmModel::means_only})
    CHECK(log_marginal_hlm(e, model, h) == doctest::Approx(log_marginal_hlm(d, model, h)).epsilon(1e-12));
}

TEST_CASE("log BF is the difference of the two marginals") {
  const auto d = three_groups();
  const auto h = small_hypers();
  const auto bf = log_bf_hlm(d, h);
  CHECK(bf.value == log_marginal_hlm(d, HlmModel::slopes_and_intercepts, h) -
                        log_marginal_hlm(d, HlmModel::means_only, h));
  CHECK(bf.std_err == 0.0);
}

TEST_CASE("default hyperparameters follow the calibration recipe") {
  const auto d = synthetic_hlm(11, {.m = 40});
  const auto h = default_hlm_hypers(d);
  // independent recomputation from raw rows
  const auto m = d.m();
  Eigen::MatrixXd est(static_cast<Eigen::Index>(m), 2);
  Eigen::Matrix2d avg_inv = Eigen::Matrix2d::Zero();
  double rss = 0.0, dof = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    const auto& grp = d.groups()[j];
    const auto n = static_cast<Eigen::Index>(grp.y.size());
    Eigen::MatrixXd x(n, 2);
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      x(i, 0) = 1.0;
      x(i, 1) = grp.ses[static_cast<std::size_t>(i)];
      y(i) = grp.y[static_cast<std::size_t>(i)];
    }
    const Eigen::VectorXd b = x.colPivHouseholderQr().solve(y);
    est.row(static_cast<Eigen::Index>(j)) = b.transpose();
    avg_inv += (x.transpose() * x).inverse();
    rss += (y - x * b).squaredNorm();
    dof += static_cast<double>(n) - 2.0;
  }
  avg_inv /= static_cast<double>(m);
  const Eigen::RowVector2d mean = est.colwise().mean();
  const Eigen::MatrixXd cen = est.rowwise() - mean;
  const Eigen::Matrix2d cov = cen.transpose() * cen / static_cast<double>(m - 1);
  const double s2 = rss / dof;
  const double g = (cov.cwiseProduct(avg_inv)).sum() / (s2 * avg_inv.squaredNorm());

  CHECK(h.mu0(0) == doctest::Approx(mean(0)).epsilon(1e-10));
  CHECK(h.mu0(1) == doctest::Approx(mean(1)).epsilon(1e-10));
  CHECK(h.lambda0(0, 0) == doctest::Approx(cov(0, 0)).epsilon(1e-9));
  CHECK(h.lambda0(0, 1) == doctest::Approx(cov(0, 1)).epsilon(1e-8));
  CHECK(h.lambda0(1, 1) == doctest::Approx(cov(1, 1)).epsilon(1e-9));
  CHECK(h.sigma0_sq == doctest::Approx(s2).epsilon(1e-10));
  CHECK(h.nu0 == 1.0);
  CHECK(h.g == doctest::Approx(g).epsilon(1e-9));
}

TEST_CASE("default calibration recovers the generating scale on synthetic data") {
  // LS estimates spread as (g+1)σ²(XᵀX)⁻¹, so the moment match lands near g+1.
  const auto d = synthetic_hlm(1);
  const auto h = default_hlm_hypers(d);
  CHECK(d.m() == 100);
  CHECK(h.g > 5.0);
  CHECK(h.g < 12.0);
  CHECK(h.sigma0_sq == doctest::Approx(82.94).epsilon(0.1));
}

TEST_CASE("default calibration errors") {
  CHECK_THROWS_AS(default_hlm_hypers(two_by_three()), Error);
  try {
    default_hlm_hypers(two_by_three());
  } catch (const Error& e) {
    CHECK(e.code() == Errc::too_few_groups);
  }
  const HlmGroup same{"s", {2, 2, 2}, {0, 1, 2}};
  std::vector<HlmGroup> groups{same, same, same};
  groups[1].id = "t";
  groups[2].id = "u";
  try {
    default_hlm_hypers(HlmDataset(groups));
    FAIL("expected calibration error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::degenerate_data);
  }
}

TEST_CASE("data from the means model favors the means model") {
  int negative = 0;
  for (int s = 1; s <= 20; ++s) {
    SyntheticHlmSpec spec;
    spec.m = 30;
    spec.means_only = true;
    const auto d = synthetic_hlm(1000 + s, spec);
    negative += log_bf_hlm(d, default_hlm_hypers(d)).value < 0.0;
  }
  CHECK(negative > 10);
}

TEST_CASE("synthetic generator is reproducible and sized like the school data") {
  const auto a = synthetic_hlm(9), b = synthetic_hlm(9), c = synthetic_hlm(10);
  CHECK(to_csv(a) == to_csv(b));
  CHECK(to_csv(a) != to_csv(c));
  CHECK(a.m() == 100);
  CHECK(a.total() > 1500);
  CHECK(a.total() < 2500);
  for (const auto& grp : a.groups()) {
    CHECK(grp.y.size() >= 10);
    CHECK(grp.y.size() <= 30);
  }
}

TEST_CASE("slice grids") {
  const auto h = default_hlm_hypers(synthetic_hlm(1));
  const auto g = slice_grid(h, "g", 15);
  CHECK(g.front() == 0.1);
  CHECK(g.back() == 1e4);
  CHECK(g[1] / g[0] == doctest::Approx(g[14] / g[13]));
  const auto mu = slice_grid(h, "mu0_2", 5);
  CHECK(mu[2] == doctest::Approx(h.mu0(1)));
  CHECK(mu[4] - mu[2] == doctest::Approx(3.0 * std::sqrt(h.lambda0(1, 1))));
  const auto off = slice_grid(h, "lambda0_12", 3);
  CHECK(off[2] == doctest::Approx(0.95 * std::sqrt(h.lambda0(0, 0) * h.lambda0(1, 1))));
  const auto s2 = slice_grid(h, "sigma0_sq", 3);
  CHECK(s2[0] == doctest::Approx(h.sigma0_sq / 10));
  CHECK(s2[1] == doctest::Approx(h.sigma0_sq));
  CHECK_THROWS_AS(slice_grid(h, "tau", 3), Error);
  CHECK_THROWS_AS(slice_grid(h, "g", 0), Error);
}

TEST_CASE("single-point slices return the center evaluation") {
  const auto d = synthetic_hlm(2, {.m = 20});
  const auto h = default_hlm_hypers(d);
  const double center = log_bf_hlm(d, h).value;
  const auto slices = hlm_slices(d, h, 1);
  REQUIRE(slices.size() == 8);
  for (std::size_t k = 0; k < slices.size(); ++k) {
    CHECK(slices[k].hyper == hyper_names()[k]);
    REQUIRE(slices[k].log_bf.size() == 1);
    CHECK(slices[k].grid[0] == get_hyper(h, slices[k].hyper));
    CHECK(slices[k].log_bf[0] == center);
  }
}

TEST_CASE("parallel slices equal the serial reference bit for bit") {
  const auto d = synthetic_hlm(4, {.m = 25});
  const auto h = default_hlm_hypers(d);
  const auto par = hlm_slices(d, h, 7);
  const auto ser = reference::hlm_slices(d, h, 7);
  CHECK(slices_to_csv(par) == slices_to_csv(ser));
}

TEST_CASE("off-diagonal values that break positive definiteness are skipped") {
  const auto d = three_groups();
  const auto h = small_hypers();
  const double lim = std::sqrt(h.lambda0(0, 0) * h.lambda0(1, 1));
  const auto s = hlm_slice(d, h, "lambda0_12", {-2 * lim, 0.0, 0.5 * lim, lim});
  CHECK(s.skipped == std::vector<bool>{true, false, false, true});
  CHECK(std::isnan(s.log_bf[0]));
  CHECK(std::isfinite(s.log_bf[2]));
  const auto csv = slices_to_csv({s});
  CHECK(csv.find("NA") != std::string::npos);
}

TEST_CASE("g dominates the synthetic slices") {
  const auto d = synthetic_hlm(1);
  const auto h = default_hlm_hypers(d);
  const auto slices = hlm_slices(d, h);
  auto range = [](const Slice& s) {
    const auto [lo, hi] = std::minmax_element(s.log_bf.begin(), s.log_bf.end());
    return *hi - *lo;
  };
  for (std::size_t k = 1; k < slices.size(); ++k) CHECK(range(slices[0]) > range(slices[k]));
  const auto& gs = slices[0];
  // monotone decreasing past the calibrated value, and crosses zero
  for (std::size_t i = 1; i < gs.grid.size(); ++i)
    if (gs.grid[i - 1] >= h.g) CHECK(gs.log_bf[i] < gs.log_bf[i - 1]);
  CHECK(*std::max_element(gs.log_bf.begin(), gs.log_bf.end()) > 0.0);
  CHECK(gs.log_bf.back() < 0.0);

  const double drop = log_bf_hlm(d, with_hyper(h, "g", 1000)).value - log_bf_hlm(d, with_hyper(h, "g", 100)).value;
  const double predicted = -(static_cast<double>(d.m()) / 2.0) * (std::log(1001.0) - std::log(101.0));
  CHECK(std::abs(drop - predicted) < 0.15 * std::abs(predicted));
}

TEST_CASE("mixed-model deviance matches dense computation") {
  const auto d = three_groups();
  Eigen::VectorXd t2(3);
  t2 << 0.8, 0.3, 0.5;
  Eigen::MatrixXd l2(2, 2);
  l2 << 0.8, 0.0, 0.3, 0.5;
  CHECK(mixed_model_deviance(d, HlmModel::slopes_and_intercepts, t2) ==
        doctest::Approx(dense_deviance(d, HlmModel::slopes_and_intercepts, l2)).epsilon(1e-10));
  Eigen::VectorXd t1(1);
  t1 << 1.7;
  Eigen::MatrixXd l1(1, 1);
  l1 << 1.7;
  CHECK(mixed_model_deviance(d, HlmModel::means_only, t1) ==
        doctest::Approx(dense_deviance(d, HlmModel::means_only, l1)).epsilon(1e-10));
}

TEST_CASE("mixed-model fit reaches the deviance minimum") {
  const auto d = synthetic_hlm(6, {.m = 30});
  const auto fit = fit_mixed_model(d, HlmModel::slopes_and_intercepts);
  CHECK(fit.n_params == 6);
  const double dev = -2.0 * fit.log_lik;
  CHECK(fit.bic == doctest::Approx(dev + 6 * std::log(static_cast<double>(d.total()))));
  // no point on a coarse grid of relative factors does better
  const double s = std::sqrt(fit.sigma_sq);
  for (double a : {0.1, 0.3, 0.6, 1.0, 2.0})
    for (double b : {-0.5, 0.0, 0.5})
      for (double c : {0.1, 0.5, 1.0, 2.0}) {
        Eigen::VectorXd t(3);
        t << a, b, c;
        CHECK(mixed_model_deviance(d, HlmModel::slopes_and_intercepts, t) >= dev - 1e-6);
      }
  const auto fit1 = fit_mixed_model(d, HlmModel::means_only);
  CHECK(fit1.n_params == 3);
  for (double a : {0.05, 0.2, 0.5, 1.0, 3.0}) {
    Eigen::VectorXd t(1);
    t << a;
    CHECK(mixed_model_deviance(d, HlmModel::means_only, t) >= -2.0 * fit1.log_lik - 1e-6);
  }
  CHECK(fit.psi(0, 0) > 0.0);
  CHECK(s > 0.0);
}
