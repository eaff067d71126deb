#include "bfsurf/surface.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <limits>

#include <json.hpp>
#include <omp.h>

#include "bfsurf/csv.hpp"
#include "bfsurf/errors.hpp"
#include "bfsurf/version.hpp"

namespace bfsurf::surface {

using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

const std::vector<std::string> kRegHypers = {"mu", "phi", "a", "b"};

// Evaluator resolved once per sweep. The HLM center is calibrated here and
// each design dim is bound to its hyperparameter name.
struct Bound {
  const EvaluatorSpec* spec = nullptr;
  std::vector<std::string> names;
  hlm::HlmHypers center;

  static void set_reg(reg::RegressionHypers& h, std::size_t& m, const std::string& name, double v) {
    if (name == "mu") h.mu = v;
    else if (name == "phi") h.phi = v;
    else if (name == "a") h.a = v;
    else if (name == "b") h.b = v;
    else if (name == "m") {
      if (!(v >= 1.0) || v != std::round(v)) throw Error(Errc::invalid_argument, "m must be a positive integer", "m");
      m = static_cast<std::size_t>(v);
    }
  }

  reg::LogBf eval(const double* loc, std::uint64_t point_seed) const {
    const auto& s = *spec;
    if (s.kind == EvaluatorKind::hlm) {
      hlm::HlmHypers h = center;
      for (std::size_t i = 0; i < names.size(); ++i) h = hlm::with_hyper(h, names[i], loc[i]);
      return hlm::log_bf_hlm(*s.hlm_data, h);
    }
    reg::RegressionHypers h = s.reg_hypers;
    std::size_t m = s.fractional_m;
    for (std::size_t i = 0; i < names.size(); ++i) set_reg(h, m, names[i], loc[i]);
    const auto& d = *s.reg_data;
    switch (s.kind) {
      case EvaluatorKind::reg_closed: return reg::log_bf_12(d, h);
      case EvaluatorKind::reg_zs: return reg::log_bf_zellner_siow(d);
      case EvaluatorKind::reg_bic: return reg::log_bf_bic(d);
      case EvaluatorKind::reg_fractional: return reg::log_bf_fractional(d, m);
      case EvaluatorKind::reg_noisy: return reg::noisy_log_bf(d, h, s.n_draws, point_seed);
      default: break;
    }
    throw Error(Errc::invalid_argument, "unknown evaluator", "evaluator");
  }
};

Bound bind(const EvaluatorSpec& spec, const design::Design& design) {
  check_compatible(spec, design.box);
  if (design.replicates < 1) throw Error(Errc::invalid_argument, "replicates must be at least 1", "replicates");
  Bound b;
  b.spec = &spec;
  for (std::size_t i = 0; i < design.box.size(); ++i)
    b.names.push_back(spec.mapping.empty() ? design.box[i].name : spec.mapping[i]);
  if (spec.kind == EvaluatorKind::hlm) {
    b.center = spec.hlm_center ? *spec.hlm_center : hlm::default_hlm_hypers(*spec.hlm_data);
    b.center.validate();
  } else {
    spec.reg_hypers.validate();
  }
  return b;
}

SurfaceSample run_one(const Bound& b, const design::Design& design, std::uint64_t seed, std::size_t k) {
  const auto reps = static_cast<std::size_t>(design.replicates);
  SurfaceSample s;
  s.location_index = k / reps;
  s.replicate = static_cast<int>(k % reps);
  const auto row = design.points.row(static_cast<Eigen::Index>(s.location_index));
  for (Eigen::Index c = 0; c < row.size(); ++c) s.location.push_back(row(c));

  const auto t0 = std::chrono::steady_clock::now();
  try {
    const auto r = b.eval(s.location.data(), design::evaluation_seed(seed, s.location_index, s.replicate));
    if (!std::isfinite(r.value)) throw Error(Errc::invalid_integrand, "non-finite log Bayes factor");
    s.log_bf = r.value;
    s.std_err = b.spec->deterministic() ? 0.0 : r.std_err;
  } catch (const std::exception& e) {
    s.log_bf = kNaN;
    s.std_err = kNaN;
    s.error = e.what();
    if (s.error.empty()) s.error = "evaluation failed";
  }
  s.eval_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return s;
}

void finish(const Surface& out) {
  if (!out.samples.empty() && out.failed() == out.samples.size())
    throw Error(Errc::sweep_failed, "every surface point failed; first error: " + out.samples.front().error);
}

Surface empty_surface(const design::Design& design) {
  Surface out;
  for (const auto& d : design.box.dims()) out.dims.push_back(d.name);
  out.samples.resize(design.evaluations());
  return out;
}

std::string cell(double v) { return std::isfinite(v) ? csv::format(v) : "NA"; }

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

}  // namespace

std::string_view to_string(EvaluatorKind k) {
  switch (k) {
    case EvaluatorKind::reg_closed: return "reg_closed";
    case EvaluatorKind::reg_zs: return "reg_zs";
    case EvaluatorKind::reg_bic: return "reg_bic";
    case EvaluatorKind::reg_fractional: return "reg_fractional";
    case EvaluatorKind::reg_noisy: return "reg_noisy";
    case EvaluatorKind::hlm: return "hlm";
  }
  return "?";
}

EvaluatorKind evaluator_from_string(std::string_view s) {
  for (auto k : {EvaluatorKind::reg_closed, EvaluatorKind::reg_zs, EvaluatorKind::reg_bic,
                 EvaluatorKind::reg_fractional, EvaluatorKind::reg_noisy, EvaluatorKind::hlm})
    if (to_string(k) == s) return k;
  throw Error(Errc::invalid_argument, "unknown evaluator '" + std::string(s) + "'", "evaluator");
}

std::vector<std::string> accepted_hypers(EvaluatorKind k) {
  if (k == EvaluatorKind::hlm) return hlm::hyper_names();
  auto out = kRegHypers;
  if (k == EvaluatorKind::reg_fractional) out.push_back("m");
  return out;
}

void check_compatible(const EvaluatorSpec& spec, const design::HyperBox& box) {
  if (spec.kind == EvaluatorKind::hlm) {
    if (!spec.hlm_data) throw Error(Errc::invalid_argument, "hlm evaluator needs an HLM dataset", "data");
  } else if (!spec.reg_data) {
    throw Error(Errc::invalid_argument, "regression evaluator needs a dataset", "data");
  }
  if (spec.kind == EvaluatorKind::reg_noisy && spec.n_draws < 1000)
    throw Error(Errc::invalid_argument, "n_draws must be at least 1000", "n_draws");
  if (!spec.mapping.empty() && spec.mapping.size() != box.size())
    throw Error(Errc::invalid_argument, "mapping needs one hyperparameter per design dim", "mapping");
  const auto ok = accepted_hypers(spec.kind);
  std::vector<std::string> seen;
  for (std::size_t i = 0; i < box.size(); ++i) {
    const auto& name = spec.mapping.empty() ? box[i].name : spec.mapping[i];
    if (std::find(ok.begin(), ok.end(), name) == ok.end())
      throw Error(Errc::invalid_argument,
                  "'" + name + "' is not a hyperparameter of the " + std::string(to_string(spec.kind)) + " evaluator",
                  box[i].name);
    if (std::find(seen.begin(), seen.end(), name) != seen.end())
      throw Error(Errc::invalid_argument, "hyperparameter '" + name + "' is mapped twice", box[i].name);
    seen.push_back(name);
  }
}

std::size_t Surface::failed() const {
  return static_cast<std::size_t>(std::count_if(samples.begin(), samples.end(), [](const auto& s) { return !s.ok(); }));
}

Surface evaluate_surface(const EvaluatorSpec& spec, const design::Design& design, std::uint64_t seed, int workers,
                         const Progress& progress) {
  const Bound b = bind(spec, design);
  Surface out = empty_surface(design);
  const auto total = static_cast<std::ptrdiff_t>(out.samples.size());
  std::atomic<std::size_t> done{0};
  const int threads = workers > 0 ? workers : omp_get_max_threads();
#pragma omp parallel for schedule(dynamic) num_threads(threads)
  for (std::ptrdiff_t k = 0; k < total; ++k) {
    out.samples[static_cast<std::size_t>(k)] = run_one(b, design, seed, static_cast<std::size_t>(k));
    const auto n = ++done;
    if (progress) progress(n, static_cast<std::size_t>(total));
  }
  finish(out);
  return out;
}

// --- classes ----------------------------------------------------------------

EvidenceClass classify(double log_bf) {
  if (!std::isfinite(log_bf)) throw Error(Errc::invalid_argument, "log Bayes factor must be finite", "log_bf");
  const double a = std::abs(log_bf);
  EvidenceClass c;
  c.direction = log_bf >= 0.0 ? Direction::favors_M1 : Direction::favors_M2;
  c.strength = a <= 1.0 ? Strength::negligible : a <= 3.0 ? Strength::positive : a <= 5.0 ? Strength::strong
                                                                                          : Strength::very_strong;
  return c;
}

std::string_view to_string(Strength s) {
  switch (s) {
    case Strength::negligible: return "negligible";
    case Strength::positive: return "positive";
    case Strength::strong: return "strong";
    case Strength::very_strong: return "very_strong";
  }
  return "?";
}

std::string_view to_string(Direction d) { return d == Direction::favors_M1 ? "favors_M1" : "favors_M2"; }

std::string to_string(EvidenceClass c) {
  return std::string(to_string(c.strength)) + "/" + std::string(to_string(c.direction));
}

// --- export -----------------------------------------------------------------

std::string to_csv(const Surface& s) {
  if (s.samples.empty()) throw Error(Errc::invalid_argument, "surface has no samples", "samples");
  std::string out;
  for (const auto& d : s.dims) out += d + ",";
  out += "replicate,log_bf,std_err,class\n";
  for (const auto& p : s.samples) {
    for (double v : p.location) out += csv::format(v) + ",";
    out += std::to_string(p.replicate) + ",";
    out += cell(p.log_bf) + "," + cell(p.std_err) + ",";
    out += p.ok() ? to_string(classify(p.log_bf)) : "failed";
    out += "\n";
  }
  return out;
}

std::string to_json(const Surface& s) {
  if (s.samples.empty()) throw Error(Errc::invalid_argument, "surface has no samples", "samples");
  json j;
  j["dims"] = s.dims;
  auto& arr = j["samples"] = json::array();
  for (const auto& p : s.samples) {
    json r;
    r["location"] = p.location;
    r["location_index"] = p.location_index;
    r["replicate"] = p.replicate;
    r["log_bf"] = number_or_null(p.log_bf);
    r["std_err"] = number_or_null(p.std_err);
    if (p.ok()) {
      const auto c = classify(p.log_bf);
      r["class"] = to_string(c.strength);
      r["direction"] = to_string(c.direction);
    } else {
      r["class"] = "failed";
      r["error"] = p.error;
    }
    arr.push_back(std::move(r));
  }
  return j.dump();
}

Surface surface_from_csv(std::string_view text) {
  const auto t = csv::parse(text);
  const auto& h = t.header;
  if (h.size() < 5 || h[h.size() - 4] != "replicate" || h[h.size() - 3] != "log_bf" || h[h.size() - 2] != "std_err" ||
      h.back() != "class")
    throw Error(Errc::parse_error, "surface CSV needs columns dims...,replicate,log_bf,std_err,class", "csv");
  Surface s;
  const std::size_t k = h.size() - 4;
  s.dims.assign(h.begin(), h.begin() + static_cast<std::ptrdiff_t>(k));
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    const auto line = t.line_numbers[r];
    SurfaceSample p;
    for (std::size_t c = 0; c < k; ++c) p.location.push_back(csv::to_double(row[c], line, h[c]));
    p.replicate = static_cast<int>(csv::to_double(row[k], line, "replicate"));
    if (row[k + 3] == "failed") {
      p.log_bf = p.std_err = kNaN;
      p.error = "failed";
    } else {
      p.log_bf = csv::to_double(row[k + 1], line, "log_bf");
      p.std_err = csv::to_double(row[k + 2], line, "std_err");
    }
    if (!s.samples.empty()) {
      const auto& prev = s.samples.back();
      p.location_index = prev.location_index + (prev.location == p.location ? 0 : 1);
    }
    s.samples.push_back(std::move(p));
  }
  return s;
}

Surface surface_from_json(std::string_view text) {
  try {
    const auto j = json::parse(text);
    Surface s;
    s.dims = j.at("dims").get<std::vector<std::string>>();
    for (const auto& r : j.at("samples")) {
      SurfaceSample p;
      p.location = r.at("location").get<std::vector<double>>();
      if (p.location.size() != s.dims.size()) throw Error(Errc::parse_error, "sample location has wrong length", "samples");
      p.location_index = r.at("location_index").get<std::size_t>();
      p.replicate = r.at("replicate").get<int>();
      if (r.contains("error")) {
        p.error = r.at("error").get<std::string>();
        p.log_bf = p.std_err = kNaN;
      } else {
        p.log_bf = r.at("log_bf").get<double>();
        p.std_err = r.at("std_err").get<double>();
      }
      s.samples.push_back(std::move(p));
    }
    return s;
  } catch (const json::exception& e) {
    throw Error(Errc::parse_error, std::string("bad surface JSON: ") + e.what(), "json");
  }
}

std::string manifest_json(const EvaluatorSpec& spec, const design::Design& design, std::uint64_t seed,
                          const Surface& result) {
  json j;
  j["software"] = {{"name", "bfsurf"}, {"version", kVersion}};
  json e;
  e["kind"] = to_string(spec.kind);
  e["mapping"] = spec.mapping;
  if (spec.kind == EvaluatorKind::hlm) {
    const auto csv = hlm::to_csv(*spec.hlm_data);
    e["dataset"] = {{"type", "hlm"}, {"groups", spec.hlm_data->m()}, {"rows", spec.hlm_data->total()},
                    {"fnv1a", fnv1a(csv)}};
    if (spec.hlm_center) {
      const auto& c = *spec.hlm_center;
      json center;
      for (const auto& n : hlm::hyper_names()) center[n] = hlm::get_hyper(c, n);
      e["center"] = center;
    } else {
      e["center"] = "calibrated";
    }
  } else {
    const auto csv = reg::to_csv(*spec.reg_data);
    e["dataset"] = {{"type", "regression"}, {"n", spec.reg_data->n()}, {"fnv1a", fnv1a(csv)}};
    e["hypers"] = {{"mu", spec.reg_hypers.mu}, {"phi", spec.reg_hypers.phi}, {"a", spec.reg_hypers.a},
                   {"b", spec.reg_hypers.b}};
    if (spec.kind == EvaluatorKind::reg_noisy) e["n_draws"] = spec.n_draws;
    if (spec.kind == EvaluatorKind::reg_fractional) e["m"] = spec.fractional_m;
  }
  j["evaluator"] = e;
  j["design"] = json::parse(design::to_json(design));
  j["seed"] = seed;
  double secs = 0.0;
  for (const auto& s : result.samples) secs += s.eval_seconds;
  j["samples"] = result.samples.size();
  j["failed"] = result.failed();
  j["eval_seconds_total"] = secs;
  return j.dump(2);
}

surrogate::TrainingSet training_set(const Surface& s, const design::HyperBox& box) {
  if (s.dims.size() != box.size()) throw Error(Errc::invalid_argument, "surface and box dims differ", "box");
  std::vector<std::size_t> good;
  for (std::size_t i = 0; i < s.samples.size(); ++i)
    if (s.samples[i].ok()) good.push_back(i);
  const auto n = static_cast<Eigen::Index>(good.size());
  const auto d = static_cast<Eigen::Index>(box.size());
  Eigen::MatrixXd native(n, d);
  Eigen::VectorXd y(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto& p = s.samples[good[static_cast<std::size_t>(r)]];
    for (Eigen::Index c = 0; c < d; ++c) native(r, c) = p.location[static_cast<std::size_t>(c)];
    y(r) = p.log_bf;
  }
  Eigen::MatrixXd x = box.to_scaled(native);
  // values exported at 17 digits can land a hair outside the box
  x = x.cwiseMax(0.0).cwiseMin(1.0);
  return {x, y};
}

}  // namespace bfsurf::surface

namespace bfsurf::reference {

surface::Surface evaluate_surface(const surface::EvaluatorSpec& spec, const design::Design& design,
                                  std::uint64_t seed) {
  const auto b = surface::bind(spec, design);
  auto out = surface::empty_surface(design);
  for (std::size_t k = 0; k < out.samples.size(); ++k) out.samples[k] = surface::run_one(b, design, seed, k);
  surface::finish(out);
  return out;
}

}  // namespace bfsurf::reference
