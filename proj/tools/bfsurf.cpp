// bfsurf command line: every pipeline stage as a subcommand.
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "bfsurf/api.hpp"
#include "bfsurf/csv.hpp"
#include "bfsurf/errors.hpp"
#include "bfsurf/server.hpp"
#include "bfsurf/version.hpp"

using namespace bfsurf;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

void emit(const std::string& out, const std::string& text) {
  if (out.empty() || out == "-") std::cout << text;
  else csv::write_file(out, text);
}

// "key=value" pairs into a JSON object of numbers.
json pairs(const std::vector<std::string>& items, const std::string& field) {
  json j = json::object();
  for (const auto& it : items) {
    const auto eq = it.find('=');
    if (eq == std::string::npos) throw Error(Errc::invalid_argument, "expected key=value, got '" + it + "'", field);
    try {
      j[it.substr(0, eq)] = std::stod(it.substr(eq + 1));
    } catch (const std::exception&) {
      throw Error(Errc::invalid_argument, "not a number in '" + it + "'", field);
    }
  }
  return j;
}

fs::path manifest_path(const std::string& out) { return fs::path(out).replace_extension(".manifest.json"); }

server::Service* g_service = nullptr;
void on_signal(int) {
  if (g_service) g_service->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayes factor surfaces: evaluate, design, emulate and serve"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  // simulate
  auto* sim = app.add_subcommand("simulate", "simulate a simple-regression dataset");
  int sim_n = 30;
  double sim_alpha = 0.0, sim_beta = 2.5, sim_sigma2 = 1.0;
  std::uint64_t sim_seed = 1;
  std::string sim_out, sim_format = "csv";
  sim->add_option("--n", sim_n, "sample size");
  sim->add_option("--alpha", sim_alpha, "intercept");
  sim->add_option("--beta", sim_beta, "slope");
  sim->add_option("--sigma2", sim_sigma2, "error variance");
  sim->add_option("--seed", sim_seed, "seed");
  sim->add_option("--out", sim_out, "output file (stdout if omitted)");
  sim->add_option("--format", sim_format, "csv or json")->check(CLI::IsMember({"csv", "json"}));

  // bf
  auto* bfc = app.add_subcommand("bf", "log Bayes factors from all four regression methods");
  std::string bf_data;
  double bf_mu = 0.0, bf_phi = 1.0, bf_a = 1.0, bf_b = 1.0;
  int bf_m = 3;
  bool bf_json = false;
  bfc->add_option("--data", bf_data, "x,y CSV")->required();
  bfc->add_option("--mu", bf_mu, "prior mean of the slope");
  bfc->add_option("--phi", bf_phi, "prior precision of the slope");
  bfc->add_option("--a", bf_a, "gamma shape");
  bfc->add_option("--b", bf_b, "gamma rate");
  bfc->add_option("--fractional-m", bf_m, "training size for the fractional BF");
  bfc->add_flag("--json", bf_json, "print the API JSON instead of text");

  // surface
  auto* surf = app.add_subcommand("surface", "evaluate a log-BF surface over a design");
  std::string s_eval = "reg_closed", s_data, s_hlm, s_grid, s_lhs_box, s_design, s_out, s_format = "csv";
  std::optional<std::uint64_t> s_synth;
  int s_groups = 100, s_lhs_n = 40, s_reps = 1, s_workers = 0, s_m = 3;
  std::uint64_t s_lhs_seed = 1, s_seed = 1;
  std::size_t s_draws = 10'000;
  std::optional<double> s_mu, s_phi, s_a, s_b;
  std::vector<std::string> s_center, s_mapping;
  surf->add_option("--evaluator", s_eval, "reg_closed, reg_zs, reg_bic, reg_fractional, reg_noisy or hlm");
  surf->add_option("--data", s_data, "regression x,y CSV");
  surf->add_option("--hlm-data", s_hlm, "HLM CSV (school,ses,mathscore)");
  surf->add_option("--synthetic-hlm", s_synth, "use the synthetic HLM dataset with this seed");
  surf->add_option("--groups", s_groups, "groups in the synthetic HLM dataset");
  surf->add_option("--grid", s_grid, "name:scale:lower:upper:count,...");
  surf->add_option("--lhs-box", s_lhs_box, "name:scale:lower:upper,... for a maximin LHS");
  surf->add_option("--lhs-n", s_lhs_n, "LHS size");
  surf->add_option("--lhs-seed", s_lhs_seed, "LHS seed");
  surf->add_option("--design", s_design, "design JSON file");
  surf->add_option("--replicates", s_reps, "evaluations per location");
  surf->add_option("--seed", s_seed, "base seed for noisy evaluators");
  surf->add_option("--n-draws", s_draws, "Monte Carlo draws per marginal (reg_noisy)");
  surf->add_option("--fractional-m", s_m, "training size for reg_fractional");
  surf->add_option("--mu", s_mu);
  surf->add_option("--phi", s_phi);
  surf->add_option("--a", s_a);
  surf->add_option("--b", s_b);
  surf->add_option("--center", s_center, "HLM center overrides, key=value");
  surf->add_option("--mapping", s_mapping, "hyperparameter for each design dim")->delimiter(',');
  surf->add_option("--workers", s_workers, "OpenMP threads (0 = default)");
  surf->add_option("--out", s_out, "output file; a .manifest.json is written next to it");
  surf->add_option("--format", s_format, "csv or json")->check(CLI::IsMember({"csv", "json"}));

  // slices
  auto* sl = app.add_subcommand("slices", "one-at-a-time HLM hyperparameter slices");
  std::string sl_hlm, sl_out, sl_format = "csv";
  std::uint64_t sl_synth = 1;
  int sl_groups = 100, sl_points = 15;
  std::vector<std::string> sl_center;
  sl->add_option("--hlm-data", sl_hlm, "HLM CSV (school,ses,mathscore)");
  sl->add_option("--synthetic-hlm", sl_synth, "synthetic dataset seed (when no CSV is given)");
  sl->add_option("--groups", sl_groups, "groups in the synthetic dataset");
  sl->add_option("--points", sl_points, "points per slice");
  sl->add_option("--center", sl_center, "center overrides, key=value");
  sl->add_option("--out", sl_out);
  sl->add_option("--format", sl_format, "csv or json")->check(CLI::IsMember({"csv", "json"}));

  // design
  auto* des = app.add_subcommand("design", "grid or maximin LHS design");
  std::string d_grid, d_box, d_out, d_format = "csv";
  int d_n = 40, d_restarts = 20, d_sweeps = 50, d_reps = 1;
  std::uint64_t d_seed = 1;
  des->add_option("--grid", d_grid, "name:scale:lower:upper:count,...");
  des->add_option("--lhs-box", d_box, "name:scale:lower:upper,...");
  des->add_option("--n", d_n, "LHS size");
  des->add_option("--seed", d_seed);
  des->add_option("--restarts", d_restarts);
  des->add_option("--sweeps", d_sweeps);
  des->add_option("--replicates", d_reps);
  des->add_option("--out", d_out);
  des->add_option("--format", d_format, "csv or json")->check(CLI::IsMember({"csv", "json"}));

  // fit
  auto* fit = app.add_subcommand("fit", "fit a GP surrogate to a surface CSV");
  std::string f_in, f_box, f_out, f_kernel = "matern52", f_nugget;
  bool f_het = false;
  std::uint64_t f_seed = 1;
  fit->add_option("--in", f_in, "surface CSV")->required();
  fit->add_option("--box", f_box, "name:scale:lower:upper,... (default: from the surface manifest)");
  fit->add_flag("--het", f_het, "heteroskedastic fit from replicates");
  fit->add_option("--kernel", f_kernel, "matern52 or se");
  fit->add_option("--nugget", f_nugget, "\"estimated\" or a fixed value (homoskedastic fits)");
  fit->add_option("--seed", f_seed);
  fit->add_option("--out", f_out)->required();

  // predict
  auto* pred = app.add_subcommand("predict", "predict from a fitted surrogate");
  std::string p_fit, p_grid, p_out, p_format = "csv";
  double p_level = 0.95;
  pred->add_option("--fit", p_fit, "fit JSON")->required();
  pred->add_option("--grid", p_grid, "name:scale:lower:upper:count,...")->required();
  pred->add_option("--level", p_level, "interval level (json output)");
  pred->add_option("--out", p_out);
  pred->add_option("--format", p_format, "csv or json")->check(CLI::IsMember({"csv", "json"}));

  // coverage
  auto* cov = app.add_subcommand("coverage", "holdout interval coverage of a fitted surrogate");
  std::string c_fit, c_holdout;
  double c_level = 0.95;
  cov->add_option("--fit", c_fit, "fit JSON")->required();
  cov->add_option("--holdout", c_holdout, "surface CSV with held-out evaluations")->required();
  cov->add_option("--level", c_level);

  // serve
  auto* srv = app.add_subcommand("serve", "run the HTTP JSON service");
  server::ServerConfig cfg;
  auto* o_port = srv->add_option("--port", cfg.port, "port (env BFSURF_PORT)");
  auto* o_dir = srv->add_option("--data-dir", cfg.data_dir, "job store directory (env BFSURF_DATA_DIR)");
  auto* o_workers = srv->add_option("--workers", cfg.workers, "job worker threads (env BFSURF_WORKERS)");
  auto* o_static = srv->add_option("--static-dir", cfg.static_dir, "UI bundle to serve under / (env BFSURF_STATIC_DIR)");
  srv->add_option("--host", cfg.host, "bind address");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*sim) {
      const auto r = api::simulate({{"n", sim_n}, {"alpha", sim_alpha}, {"beta", sim_beta}, {"sigma2", sim_sigma2},
                                    {"seed", sim_seed}});
      emit(sim_out, sim_format == "csv" ? r.at("csv").get<std::string>() : r.dump() + "\n");
    } else if (*bfc) {
      const auto r = api::bf({{"data", {{"csv", csv::read_file(bf_data)}}},
                              {"mu", bf_mu},
                              {"phi", bf_phi},
                              {"a", bf_a},
                              {"b", bf_b},
                              {"fractional_m", bf_m}});
      if (bf_json) {
        std::cout << r.dump() << "\n";
      } else {
        for (const auto& m : r.at("methods")) {
          const auto name = m.at("method").get<std::string>();
          if (m.contains("error")) {
            std::printf("%-18s  error: %s\n", name.c_str(), m.at("error").get<std::string>().c_str());
          } else {
            const auto cls = m.at("class").get<std::string>() + "/" + m.at("direction").get<std::string>();
            std::printf("%-18s  log BF = %12.6f  %s\n", name.c_str(), m.at("log_bf").get<double>(), cls.c_str());
          }
        }
      }
    } else if (*surf) {
      json req;
      req["evaluator"] = s_eval;
      if (!s_data.empty()) req["data"] = {{"csv", csv::read_file(s_data)}};
      if (!s_hlm.empty()) req["hlm"] = {{"csv", csv::read_file(s_hlm)}};
      else if (s_synth) req["hlm"] = {{"synthetic", {{"seed", *s_synth}, {"m", s_groups}}}};
      if (!s_grid.empty()) req["grid"] = s_grid;
      if (!s_lhs_box.empty()) req["lhs"] = {{"box", s_lhs_box}, {"n", s_lhs_n}, {"seed", s_lhs_seed}};
      if (!s_design.empty()) req["design"] = json::parse(csv::read_file(s_design));
      req["replicates"] = s_reps;
      req["seed"] = s_seed;
      req["n_draws"] = s_draws;
      req["fractional_m"] = s_m;
      json hy = json::object();
      if (s_mu) hy["mu"] = *s_mu;
      if (s_phi) hy["phi"] = *s_phi;
      if (s_a) hy["a"] = *s_a;
      if (s_b) hy["b"] = *s_b;
      if (!hy.empty()) req["hypers"] = hy;
      if (!s_center.empty()) req["center"] = pairs(s_center, "center");
      if (!s_mapping.empty()) req["mapping"] = s_mapping;
      const auto job = api::parse_surface(req);
      const auto out = api::run_surface(job, s_workers);
      emit(s_out, s_format == "csv" ? out.csv : out.json);
      if (!s_out.empty() && s_out != "-") csv::write_file(manifest_path(s_out).string(), out.manifest);
    } else if (*sl) {
      json req;
      if (!sl_hlm.empty()) req["hlm"] = {{"csv", csv::read_file(sl_hlm)}};
      else req["hlm"] = {{"synthetic", {{"seed", sl_synth}, {"m", sl_groups}}}};
      req["points"] = sl_points;
      if (!sl_center.empty()) req["center"] = pairs(sl_center, "center");
      const auto r = api::hlm_slices(req);
      emit(sl_out, sl_format == "csv" ? r.at("csv").get<std::string>() : r.dump() + "\n");
    } else if (*des) {
      if (d_grid.empty() == d_box.empty()) throw Error(Errc::invalid_argument, "give one of --grid or --lhs-box", "grid");
      design::Design d;
      if (!d_grid.empty()) {
        const auto [box, counts] = design::parse_grid(d_grid);
        d = design::grid_design(box, counts);
      } else {
        d = design::lhs_maximin(api::box_from_json(d_box), static_cast<std::size_t>(d_n), d_seed, d_restarts,
                                d_sweeps);
      }
      d = design::with_replicates(std::move(d), d_reps);
      emit(d_out, d_format == "csv" ? design::to_csv(d) : design::to_json(d) + "\n");
    } else if (*fit) {
      json req;
      req["surface_csv"] = csv::read_file(f_in);
      if (!f_box.empty()) {
        req["box"] = f_box;
      } else {
        const auto mp = manifest_path(f_in);
        if (!fs::exists(mp))
          throw Error(Errc::invalid_argument, "no --box given and no manifest at " + mp.string(), "box");
        req["box"] = json::parse(csv::read_file(mp.string())).at("design").at("dims");
      }
      req["het"] = f_het;
      req["kernel"] = f_kernel;
      req["seed"] = f_seed;
      if (!f_nugget.empty()) req["nugget"] = f_nugget == "estimated" ? json("estimated") : json(std::stod(f_nugget));
      emit(f_out, api::run_fit(api::parse_fit(req)));
    } else if (*pred) {
      const auto artifact = csv::read_file(p_fit);
      if (p_format == "json") {
        emit(p_out, api::predict({{"fit", artifact}, {"grid", p_grid}, {"level", p_level}}).dump() + "\n");
      } else {
        const auto [box, f] = api::load_fit_artifact(artifact);
        const auto [gbox, counts] = design::parse_grid(p_grid);
        const auto x = design::grid_design(gbox, counts).points;
        if (gbox.size() != box.size()) throw Error(Errc::invalid_argument, "grid dims do not match the fit", "grid");
        std::vector<std::string> names;
        for (const auto& d : box.dims()) names.push_back(d.name);
        emit(p_out, surrogate::predictions_to_csv(x, surrogate::predict(f, box.to_scaled(x)), names));
      }
    } else if (*cov) {
      const auto [box, f] = api::load_fit_artifact(csv::read_file(c_fit));
      const auto holdout = surface::training_set(surface::surface_from_csv(csv::read_file(c_holdout)), box);
      std::printf("coverage %.6f over %zu holdout points at level %.3f\n", surrogate::coverage(f, holdout, c_level),
                  holdout.size(), c_level);
    } else if (*srv) {
      cfg = server::with_env_fallbacks(cfg, o_port->count() > 0, o_dir->count() > 0, o_workers->count() > 0,
                                       o_static->count() > 0);
      server::Service service(cfg);
      const int port = service.bind();
      g_service = &service;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::fprintf(stderr, "bfsurf %s listening on %s:%d (data %s, %d workers)\n", std::string(kVersion).c_str(),
                   cfg.host.c_str(), port, cfg.data_dir.string().c_str(), cfg.workers);
      service.run();
      g_service = nullptr;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    if (const auto* err = dynamic_cast<const Error*>(&e); err && !err->field().empty())
      std::fprintf(stderr, "  (field: %s)\n", err->field().c_str());
    return api::status_for(e) == 400 ? 2 : 1;
  }
  return 0;
}
