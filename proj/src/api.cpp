#include "bfsurf/api.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <boost/math/distributions/gamma.hpp>
#include <boost/math/distributions/normal.hpp>

#include "bfsurf/csv.hpp"
#include "bfsurf/errors.hpp"
#include "bfsurf/hlm_bf.hpp"
#include "bfsurf/reg_bf.hpp"

namespace bfsurf::api {

namespace {

constexpr std::size_t kMaxEvaluations = 1'000'000;
constexpr std::size_t kMaxPredictPoints = 250'000;

[[noreturn]] void bad(const std::string& field, const std::string& what) {
  throw Error(Errc::invalid_argument, what, field);
}

const json& require_object(const json& j, const std::string& field) {
  if (!j.is_object()) bad(field, "'" + field + "' must be a JSON object");
  return j;
}

double number(const json& j, const std::string& key, std::optional<double> def = std::nullopt) {
  if (!j.contains(key) || j.at(key).is_null()) {
    if (def) return *def;
    bad(key, "missing field '" + key + "'");
  }
  const auto& v = j.at(key);
  if (!v.is_number()) bad(key, "'" + key + "' must be a number");
  const double d = v.get<double>();
  if (!std::isfinite(d)) bad(key, "'" + key + "' must be finite");
  return d;
}

std::int64_t integer(const json& j, const std::string& key, std::int64_t def, std::int64_t lo, std::int64_t hi) {
  if (!j.contains(key) || j.at(key).is_null()) return def;
  const auto& v = j.at(key);
  double d = 0.0;
  if (v.is_number_integer()) d = static_cast<double>(v.get<std::int64_t>());
  else if (v.is_number_unsigned()) d = static_cast<double>(v.get<std::uint64_t>());
  else if (v.is_number_float()) d = v.get<double>();
  else bad(key, "'" + key + "' must be an integer");
  if (d != std::floor(d) || d < static_cast<double>(lo) || d > static_cast<double>(hi))
    bad(key, "'" + key + "' must be an integer in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
  return static_cast<std::int64_t>(d);
}

std::uint64_t seed_of(const json& j, const std::string& key = "seed") {
  if (!j.contains(key) || j.at(key).is_null()) return 1;
  const auto& v = j.at(key);
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return static_cast<std::uint64_t>(v.get<std::int64_t>());
  bad(key, "'" + key + "' must be a non-negative integer");
}

std::string text(const json& j, const std::string& key, const std::string& def) {
  if (!j.contains(key) || j.at(key).is_null()) return def;
  if (!j.at(key).is_string()) bad(key, "'" + key + "' must be a string");
  return j.at(key).get<std::string>();
}

bool flag(const json& j, const std::string& key, bool def) {
  if (!j.contains(key) || j.at(key).is_null()) return def;
  if (!j.at(key).is_boolean()) bad(key, "'" + key + "' must be true or false");
  return j.at(key).get<bool>();
}

std::vector<double> numbers(const json& j, const std::string& key) {
  if (!j.contains(key) || !j.at(key).is_array()) bad(key, "'" + key + "' must be an array of numbers");
  std::vector<double> out;
  for (const auto& v : j.at(key)) {
    if (!v.is_number()) bad(key, "'" + key + "' must be an array of numbers");
    out.push_back(v.get<double>());
  }
  return out;
}

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

reg::RegressionData simulated(const json& s) {
  require_object(s, "simulate");
  const auto n = integer(s, "n", 30, 3, 1'000'000);
  return reg::simulate_regression(static_cast<std::size_t>(n), number(s, "alpha", 0.0), number(s, "beta", 2.5),
                                  number(s, "sigma2", 1.0), seed_of(s));
}

reg::RegressionData reg_data(const json& req) {
  if (!req.contains("data")) bad("data", "missing field 'data'");
  const auto& d = require_object(req.at("data"), "data");
  if (d.contains("csv")) return reg::regression_from_csv(text(d, "csv", ""));
  if (d.contains("simulate")) return simulated(d.at("simulate"));
  if (d.contains("x") || d.contains("y")) return reg::RegressionData(numbers(d, "x"), numbers(d, "y"));
  bad("data", "'data' needs x and y arrays, csv text or a simulate object");
}

reg::RegressionHypers reg_hypers(const json& j) {
  reg::RegressionHypers h;
  h.mu = number(j, "mu", 0.0);
  h.phi = number(j, "phi", 1.0);
  h.a = number(j, "a", 1.0);
  h.b = number(j, "b", 1.0);
  h.validate();
  return h;
}

hlm::HlmDataset hlm_data(const json& req) {
  if (!req.contains("hlm") || req.at("hlm").is_null()) return hlm::synthetic_hlm(1);
  const auto& h = require_object(req.at("hlm"), "hlm");
  if (h.contains("csv")) return hlm::load_hlm_csv(text(h, "csv", ""));
  const json s = h.contains("synthetic") ? require_object(h.at("synthetic"), "synthetic") : json::object();
  hlm::SyntheticHlmSpec spec;
  spec.m = static_cast<std::size_t>(integer(s, "m", 100, 3, 100'000));
  spec.means_only = flag(s, "means_only", false);
  return hlm::synthetic_hlm(seed_of(s), spec);
}

hlm::HlmHypers hlm_center(const json& req, const hlm::HlmDataset& data) {
  auto c = hlm::default_hlm_hypers(data);
  if (req.contains("center") && !req.at("center").is_null()) {
    const auto& j = require_object(req.at("center"), "center");
    for (const auto& [k, v] : j.items()) {
      const auto& names = hlm::hyper_names();
      if (std::find(names.begin(), names.end(), k) == names.end()) bad("center", "unknown HLM hyperparameter '" + k + "'");
      c = hlm::with_hyper(c, k, number(j, k));
    }
    c.validate();
  }
  return c;
}

json hlm_hypers_json(const hlm::HlmHypers& h) {
  json j;
  for (const auto& n : hlm::hyper_names()) j[n] = hlm::get_hyper(h, n);
  return j;
}

json bf_entry(std::string_view label, const std::function<reg::LogBf()>& f) {
  json e;
  e["method"] = label;
  try {
    const auto r = f();
    const auto c = surface::classify(r.value);
    e["log_bf"] = r.value;
    e["std_err"] = r.std_err;
    e["class"] = surface::to_string(c.strength);
    e["direction"] = surface::to_string(c.direction);
    e["fallback"] = r.fallback;
  } catch (const Error& err) {
    // invalid requests fail the whole call; a method that cannot handle the
    // data reports its own error
    if (err.code() == Errc::invalid_argument) throw;
    e["log_bf"] = nullptr;
    e["error"] = err.what();
  }
  return e;
}

design::Design design_of(const json& req) {
  const int given = static_cast<int>(req.contains("grid")) + static_cast<int>(req.contains("lhs")) +
                    static_cast<int>(req.contains("design"));
  if (given != 1) bad("grid", "give exactly one of 'grid', 'lhs' or 'design'");
  design::Design d;
  if (req.contains("grid")) {
    const auto [box, counts] = design::parse_grid(text(req, "grid", ""));
    d = design::grid_design(box, counts, kMaxEvaluations);
  } else if (req.contains("lhs")) {
    const auto& l = require_object(req.at("lhs"), "lhs");
    if (!l.contains("box")) bad("box", "missing field 'box'");
    const auto box = box_from_json(l.at("box"));
    const auto n = integer(l, "n", 40, 2, 100'000);
    d = design::lhs_maximin(box, static_cast<std::size_t>(n), seed_of(l),
                            static_cast<int>(integer(l, "restarts", 20, 1, 1000)),
                            static_cast<int>(integer(l, "sweeps", 50, 0, 10'000)));
  } else {
    d = design::design_from_json(req.at("design").dump());
  }
  d = design::with_replicates(std::move(d), static_cast<int>(integer(req, "replicates", d.replicates, 1, 10'000)));
  if (d.evaluations() > kMaxEvaluations) throw Error(Errc::grid_too_large, "too many evaluations", "replicates");
  return d;
}

Eigen::MatrixXd prediction_points(const json& req, const design::HyperBox& box) {
  if (req.contains("grid") == req.contains("points")) bad("grid", "give exactly one of 'grid' or 'points'");
  if (req.contains("grid")) {
    const auto [gbox, counts] = design::parse_grid(text(req, "grid", ""));
    if (gbox.size() != box.size()) bad("grid", "grid dims do not match the fitted box");
    for (std::size_t i = 0; i < box.size(); ++i)
      if (gbox[i].name != box[i].name) bad("grid", "grid dim '" + gbox[i].name + "' should be '" + box[i].name + "'");
    return design::grid_design(gbox, counts, kMaxPredictPoints).points;
  }
  const auto& pts = req.at("points");
  if (!pts.is_array()) bad("points", "'points' must be an array of rows");
  if (pts.size() > kMaxPredictPoints) bad("points", "too many prediction points");
  Eigen::MatrixXd x(static_cast<Eigen::Index>(pts.size()), static_cast<Eigen::Index>(box.size()));
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (!pts[i].is_array() || pts[i].size() != box.size()) bad("points", "each point needs one value per box dim");
    for (std::size_t c = 0; c < box.size(); ++c) {
      if (!pts[i][c].is_number()) bad("points", "point coordinates must be numbers");
      x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = pts[i][c].get<double>();
    }
  }
  return x;
}

std::string lookup_or_fail(const ArtifactLookup& lookup, const std::string& id, const std::string& file,
                           const std::string& field) {
  if (!lookup) bad(field, "job references are not available here");
  return lookup(id, file);
}

}  // namespace

// --- synchronous --------------------------------------------------------------

json simulate(const json& req) {
  require_object(req, "body");
  const auto d = simulated(req);
  json out;
  out["n"] = d.n();
  out["x"] = d.x();
  out["y"] = d.y();
  out["ls_slope"] = d.ls_slope();
  out["p_value"] = d.slope_p_value();
  out["csv"] = reg::to_csv(d);
  return out;
}

json bf(const json& req) {
  require_object(req, "body");
  const auto data = reg_data(req);
  const auto h = reg_hypers(req);
  const auto m = static_cast<std::size_t>(integer(req, "fractional_m", 3, 1, 1'000'000));
  json out;
  out["n"] = data.n();
  out["hypers"] = {{"mu", h.mu}, {"phi", h.phi}, {"a", h.a}, {"b", h.b}};
  out["ls_slope"] = data.ls_slope();
  out["p_value"] = data.n() >= 3 ? number_or_null(data.slope_p_value()) : json(nullptr);
  out["methods"] = json::array({
      bf_entry(to_string(reg::BfMethod::closed_quadrature), [&] { return reg::log_bf_12(data, h); }),
      bf_entry(to_string(reg::BfMethod::zellner_siow), [&] { return reg::log_bf_zellner_siow(data); }),
      bf_entry(to_string(reg::BfMethod::bic), [&] { return reg::log_bf_bic(data); }),
      bf_entry(to_string(reg::BfMethod::fractional), [&] { return reg::log_bf_fractional(data, m); }),
  });
  return out;
}

json hlm_slices(const json& req) {
  require_object(req, "body");
  const auto data = hlm_data(req);
  const auto center = hlm_center(req, data);
  const auto points = static_cast<std::size_t>(integer(req, "points", 15, 1, 500));
  const auto slices = hlm::hlm_slices(data, center, points);
  json out;
  out["groups"] = data.m();
  out["rows"] = data.total();
  out["center"] = hlm_hypers_json(center);
  out["center_log_bf"] = hlm::log_bf_hlm(data, center).value;
  auto& arr = out["slices"] = json::array();
  for (const auto& s : slices) {
    json j;
    j["hyper"] = s.hyper;
    j["log_scale"] = hlm::hyper_is_log(s.hyper);
    j["center_value"] = hlm::get_hyper(center, s.hyper);
    j["grid"] = s.grid;
    auto& lb = j["log_bf"] = json::array();
    for (double v : s.log_bf) lb.push_back(number_or_null(v));
    j["skipped"] = s.skipped;
    arr.push_back(std::move(j));
  }
  out["csv"] = hlm::slices_to_csv(slices);
  return out;
}

json predict(const json& req, const ArtifactLookup& lookup) {
  require_object(req, "body");
  std::string artifact;
  if (req.contains("fit")) {
    artifact = req.at("fit").is_string() ? req.at("fit").get<std::string>() : req.at("fit").dump();
  } else if (req.contains("fit_job")) {
    artifact = lookup_or_fail(lookup, text(req, "fit_job", ""), "result.json", "fit_job");
  } else {
    bad("fit", "give 'fit' or 'fit_job'");
  }
  const auto [box, fit] = load_fit_artifact(artifact);
  const auto x = prediction_points(req, box);
  const double level = number(req, "level", 0.95);
  if (!(level > 0.0 && level < 1.0)) bad("level", "'level' must be in (0, 1)");
  const auto p = surrogate::predict(fit, box.to_scaled(x));
  const auto [lo, hi] = p.interval(level);

  json out;
  json dims = json::array();
  for (const auto& d : box.dims()) dims.push_back(d.name);
  out["dims"] = dims;
  out["level"] = level;
  auto& pts = out["points"] = json::array();
  json mean = json::array(), sdm = json::array(), sdo = json::array(), jl = json::array(), jh = json::array();
  json cls = json::array(), dir = json::array(), ext = json::array();
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index c = 0; c < x.cols(); ++c) row.push_back(x(i, c));
    pts.push_back(std::move(row));
    mean.push_back(p.mean(i));
    sdm.push_back(std::sqrt(p.var_mean(i)));
    sdo.push_back(std::sqrt(p.var_obs(i)));
    jl.push_back(lo(i));
    jh.push_back(hi(i));
    const auto c = surface::classify(p.mean(i));
    cls.push_back(surface::to_string(c.strength));
    dir.push_back(surface::to_string(c.direction));
    ext.push_back(static_cast<bool>(p.extrapolated[static_cast<std::size_t>(i)]));
  }
  out["mean"] = std::move(mean);
  out["sd_mean"] = std::move(sdm);
  out["sd_obs"] = std::move(sdo);
  out["lower"] = std::move(jl);
  out["upper"] = std::move(jh);
  out["class"] = std::move(cls);
  out["direction"] = std::move(dir);
  out["extrapolated"] = std::move(ext);
  return out;
}

json priors_density(const std::map<std::string, std::string>& query) {
  json q = json::object();
  for (const auto& [k, v] : query) {
    if (k != "mu" && k != "phi" && k != "a" && k != "b" && k != "points") bad(k, "unknown parameter '" + k + "'");
    try {
      std::size_t used = 0;
      q[k] = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
    } catch (const std::exception&) {
      bad(k, "'" + k + "' must be a number");
    }
  }
  const auto h = reg_hypers(q);
  const auto n = static_cast<std::size_t>(integer(q, "points", 201, 2, 10'000));

  const double sd = 1.0 / std::sqrt(h.phi);
  const boost::math::normal_distribution<> beta(h.mu, sd);
  const boost::math::gamma_distribution<> gamma(h.a, 1.0 / h.b);
  const double gmax = boost::math::quantile(gamma, 0.995);
  json bx = json::array(), bd = json::array(), gx = json::array(), gd = json::array();
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(n - 1);
    const double xb = h.mu + sd * (-4.0 + 8.0 * t);
    bx.push_back(xb);
    bd.push_back(boost::math::pdf(beta, xb));
    // skip 0, where the density is infinite for shape < 1
    const double xg = gmax * (static_cast<double>(i) + 1.0) / static_cast<double>(n);
    gx.push_back(xg);
    gd.push_back(boost::math::pdf(gamma, xg));
  }
  json out;
  out["beta"] = {{"mean", h.mu}, {"sd", sd}, {"x", bx}, {"density", bd}};
  out["gamma"] = {{"shape", h.a}, {"rate", h.b}, {"x", gx}, {"density", gd}};
  return out;
}

// --- sweeps and fits ------------------------------------------------------------

SurfaceJob parse_surface(const json& req) {
  require_object(req, "body");
  SurfaceJob job;
  auto& s = job.spec;
  s.kind = surface::evaluator_from_string(text(req, "evaluator", "reg_closed"));
  if (s.kind == surface::EvaluatorKind::hlm) {
    s.hlm_data = hlm_data(req);
    if (req.contains("center")) s.hlm_center = hlm_center(req, *s.hlm_data);
  } else {
    s.reg_data = reg_data(req);
    s.reg_hypers = reg_hypers(req.contains("hypers") ? require_object(req.at("hypers"), "hypers") : json::object());
  }
  s.n_draws = static_cast<std::size_t>(integer(req, "n_draws", 10'000, 1000, 100'000'000));
  s.fractional_m = static_cast<std::size_t>(integer(req, "fractional_m", 3, 1, 1'000'000));
  if (req.contains("mapping")) {
    const auto& m = req.at("mapping");
    if (!m.is_array()) bad("mapping", "'mapping' must be an array of hyperparameter names");
    for (const auto& v : m) {
      if (!v.is_string()) bad("mapping", "'mapping' must be an array of hyperparameter names");
      s.mapping.push_back(v.get<std::string>());
    }
  }
  job.design = design_of(req);
  job.seed = seed_of(req);
  surface::check_compatible(s, job.design.box);
  return job;
}

SurfaceArtifacts run_surface(const SurfaceJob& job, int workers, const surface::Progress& progress) {
  const auto s = surface::evaluate_surface(job.spec, job.design, job.seed, workers, progress);
  return {surface::to_csv(s), surface::to_json(s), surface::manifest_json(job.spec, job.design, job.seed, s)};
}

FitJob parse_fit(const json& req, const ArtifactLookup& lookup) {
  require_object(req, "body");
  FitJob job;
  std::optional<design::HyperBox> box;
  if (req.contains("box")) box = box_from_json(req.at("box"));
  surface::Surface surf;
  if (req.contains("surface_job")) {
    const auto id = text(req, "surface_job", "");
    surf = surface::surface_from_csv(lookup_or_fail(lookup, id, "result.csv", "surface_job"));
    if (!box) {
      const auto manifest = json::parse(lookup_or_fail(lookup, id, "manifest.json", "surface_job"));
      box = box_from_json(manifest.at("design").at("dims"));
    }
  } else if (req.contains("surface_csv")) {
    surf = surface::surface_from_csv(text(req, "surface_csv", ""));
  } else if (req.contains("x")) {
    if (!box) bad("box", "inline training data needs a 'box'");
    const auto& xs = req.at("x");
    const auto y = numbers(req, "y");
    if (!xs.is_array() || xs.size() != y.size()) bad("x", "'x' needs one row per 'y' value");
    for (const auto& d : box->dims()) surf.dims.push_back(d.name);
    for (std::size_t i = 0; i < y.size(); ++i) {
      surface::SurfaceSample p;
      if (!xs[i].is_array() || xs[i].size() != box->size()) bad("x", "each row of 'x' needs one value per box dim");
      for (const auto& v : xs[i]) {
        if (!v.is_number()) bad("x", "'x' values must be numbers");
        p.location.push_back(v.get<double>());
      }
      p.log_bf = y[i];
      surf.samples.push_back(std::move(p));
    }
  } else {
    bad("surface_job", "give 'surface_job', 'surface_csv' or inline 'x'/'y'");
  }
  if (!box) bad("box", "missing field 'box'");
  if (surf.dims.size() != box->size()) bad("box", "box dims do not match the surface");
  for (std::size_t i = 0; i < box->size(); ++i)
    if (surf.dims[i] != (*box)[i].name) bad("box", "box dim '" + (*box)[i].name + "' should be '" + surf.dims[i] + "'");
  job.box = *box;
  job.train = surface::training_set(surf, job.box);
  job.het = flag(req, "het", true);
  if (req.contains("nugget")) {
    const auto& n = req.at("nugget");
    if (n.is_string() && n.get<std::string>() == "estimated") job.nugget = surrogate::Nugget::estimated();
    else if (n.is_number() && n.get<double>() > 0.0) job.nugget = surrogate::Nugget::fixed(n.get<double>());
    else bad("nugget", "'nugget' must be \"estimated\" or a positive number");
  }
  job.options.family = surrogate::kernel_from_string(text(req, "kernel", "matern52"));
  job.options.seed = seed_of(req);
  job.options.starts = static_cast<int>(integer(req, "starts", 5, 1, 100));
  return job;
}

std::string run_fit(const FitJob& job) {
  const auto fit = job.het ? surrogate::fit_hetgp(job.train, job.options)
                           : surrogate::fit_gp(job.train, job.nugget, job.options);
  return fit_artifact(job.box, fit);
}

std::string fit_artifact(const design::HyperBox& box, const surrogate::HetGpFit& fit) {
  json j;
  j["box"] = box_to_json(box);
  j["fit"] = json::parse(surrogate::to_json(fit));
  return j.dump();
}

std::pair<design::HyperBox, surrogate::HetGpFit> load_fit_artifact(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception&) {
    bad("fit", "fit artifact is not valid JSON");
  }
  if (!j.is_object() || !j.contains("box") || !j.contains("fit")) bad("fit", "fit artifact needs 'box' and 'fit'");
  auto box = box_from_json(j.at("box"), "fit");
  auto fit = surrogate::fit_from_json(j.at("fit").dump());
  if (static_cast<std::size_t>(fit.mean_gp.x.cols()) != box.size()) bad("fit", "fit and box dimensions differ");
  return {std::move(box), std::move(fit)};
}

// --- helpers -------------------------------------------------------------------

design::HyperBox box_from_json(const json& j, const std::string& field) {
  std::vector<design::Dim> dims;
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    std::size_t start = 0;
    while (true) {
      const auto comma = s.find(',', start);
      dims.push_back(design::parse_dim(s.substr(start, comma == std::string::npos ? std::string::npos : comma - start)));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
  } else if (j.is_array()) {
    for (const auto& d : j) {
      require_object(d, field);
      dims.push_back({text(d, "name", ""), number(d, "lower"), number(d, "upper"),
                      design::scale_from_string(text(d, "scale", "linear"))});
    }
  } else {
    bad(field, "'" + field + "' must be a dim string or an array of dims");
  }
  try {
    return design::HyperBox(std::move(dims));
  } catch (const Error& e) {
    throw Error(e.code(), e.what(), field);
  }
}

json box_to_json(const design::HyperBox& box) {
  json arr = json::array();
  for (const auto& d : box.dims())
    arr.push_back({{"name", d.name}, {"lower", d.lower}, {"upper", d.upper}, {"scale", design::to_string(d.scale)}});
  return arr;
}

int status_for(const std::exception& e) {
  if (dynamic_cast<const json::exception*>(&e)) return 400;
  if (const auto* err = dynamic_cast<const Error*>(&e)) {
    switch (err->code()) {
      case Errc::invalid_argument:
      case Errc::parse_error:
      case Errc::grid_too_large:
      case Errc::insufficient_sample: return 400;
      default: return 422;
    }
  }
  return 500;
}

json error_body(const std::exception& e) {
  json j;
  j["error"] = e.what();
  if (const auto* err = dynamic_cast<const Error*>(&e); err && !err->field().empty()) j["field"] = err->field();
  return j;
}

}  // namespace bfsurf::api
