#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>

#include <json.hpp>

#include "bfsurf/design.hpp"
#include "bfsurf/surface.hpp"
#include "bfsurf/surrogate.hpp"

// JSON request handlers shared by the CLI and the HTTP service. Both front
// ends build the same request object and print the same artifact, which is
// what keeps their outputs byte-identical.
//
// Validation problems throw bfsurf::Error with code invalid_argument or
// parse_error and the offending field name; anything else is a computation
// error.
namespace bfsurf::api {

using nlohmann::json;

/// Reads job artifacts (file name within the job) for requests that point at
/// an earlier job. Throws Error naming the field when the job is unknown.
using ArtifactLookup = std::function<std::string(const std::string& job_id, const std::string& file)>;

// --- synchronous -------------------------------------------------------------

/// {n, alpha, beta, sigma2, seed} -> {x, y, ls_slope, p_value, csv}
json simulate(const json& req);

/// {data, mu, phi, a, b, fractional_m?} -> four labeled log BFs.
json bf(const json& req);

/// {hlm?, center?, points?} -> calibrated center, slices and their CSV.
json hlm_slices(const json& req);

/// {fit | fit_job, grid | points, level?} -> mean/sd arrays on native inputs.
json predict(const json& req, const ArtifactLookup& lookup = {});

/// {mu, phi, a, b, points?} -> beta and gamma prior density curves.
json priors_density(const std::map<std::string, std::string>& query);

// --- sweeps and fits ---------------------------------------------------------

struct SurfaceJob {
  surface::EvaluatorSpec spec;
  design::Design design;
  std::uint64_t seed = 1;
};

/// Validates and resolves a surface request without evaluating anything.
SurfaceJob parse_surface(const json& req);

struct SurfaceArtifacts {
  std::string csv, json, manifest;
};
SurfaceArtifacts run_surface(const SurfaceJob& job, int workers = 0, const surface::Progress& progress = {});

struct FitJob {
  design::HyperBox box;
  surrogate::TrainingSet train;
  bool het = true;
  surrogate::Nugget nugget = surrogate::Nugget::estimated();
  surrogate::FitOptions options;
};

FitJob parse_fit(const json& req, const ArtifactLookup& lookup = {});
/// The fit artifact: {"box": [...], "fit": {...}}.
std::string run_fit(const FitJob& job);

std::string fit_artifact(const design::HyperBox& box, const surrogate::HetGpFit& fit);
std::pair<design::HyperBox, surrogate::HetGpFit> load_fit_artifact(std::string_view text);

// --- shared helpers ----------------------------------------------------------

/// Dims as [{name, lower, upper, scale}] (native bounds) or a
/// "name:scale:lower:upper,..." string (log10 bounds as exponents).
design::HyperBox box_from_json(const json& j, const std::string& field = "box");
json box_to_json(const design::HyperBox& box);

/// HTTP status for an exception thrown by a handler: 400 for validation
/// errors, 422 for computation errors.
int status_for(const std::exception& e);
json error_body(const std::exception& e);

}  // namespace bfsurf::api
