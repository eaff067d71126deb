#include <doctest.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "bfsurf/api.hpp"
#include "bfsurf/csv.hpp"
#include "bfsurf/errors.hpp"
#include "bfsurf/server.hpp"

// after Eigen, see server.cpp
#include <httplib.h>

using namespace bfsurf;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("bfsurf_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slope_csv() { return api::simulate({{"n", 30}, {"beta", 2.5}, {"sigma2", 1.0}, {"seed", 1}}).at("csv"); }

// A service on an ephemeral port, serving from a background thread.
struct Running {
  server::Service service;
  std::thread thread;
  httplib::Client client;

  explicit Running(server::ServerConfig cfg) : service(with_port0(std::move(cfg))), client("127.0.0.1", bind_port()) {
    thread = std::thread([this] { service.run(); });
    client.set_read_timeout(60, 0);
    for (int i = 0; i < 200 && !client.Get("/v1/health"); ++i) std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
  ~Running() {
    service.stop();
    thread.join();
  }

  static server::ServerConfig with_port0(server::ServerConfig c) {
    c.port = 0;
    return c;
  }
  int bind_port() { return service.bind(); }

  httplib::Result post(const std::string& path, const json& body) {
    return client.Post(path, body.dump(), "application/json");
  }

  json wait(const std::string& id) {
    for (int i = 0; i < 6000; ++i) {
      auto r = client.Get("/v1/jobs/" + id);
      REQUIRE(r);
      const auto j = json::parse(r->body);
      if (j.at("status") == "done" || j.at("status") == "failed") return j;
      std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
    FAIL("job did not finish");
    return {};
  }
};

server::ServerConfig config_in(const fs::path& dir) {
  server::ServerConfig c;
  c.data_dir = dir;
  c.workers = 2;
  return c;
}

void run_cli(const std::string& args, int* code, const std::string& stdout_to = "/dev/null") {
  const int rc = std::system((std::string(BFSURF_CLI) + " " + args + " > " + stdout_to + " 2>/dev/null").c_str());
  *code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST_CASE("bf handler returns four labeled methods") {
  const auto r = api::bf({{"data", {{"csv", slope_csv()}}}, {"mu", 0}, {"phi", 1}, {"a", 1}, {"b", 1}});
  REQUIRE(r.at("methods").size() == 4);
  std::vector<std::string> names;
  for (const auto& m : r.at("methods")) {
    names.push_back(m.at("method"));
    CHECK(m.at("log_bf").is_number());
  }
  CHECK(names == std::vector<std::string>{"closed_quadrature", "zellner_siow", "bic", "fractional"});
  const auto data = reg::regression_from_csv(slope_csv());
  CHECK(r.at("methods")[0].at("log_bf").get<double>() == reg::log_bf_12(data, {}).value);
  CHECK(r.at("p_value").get<double>() == data.slope_p_value());
  // same dataset given three ways
  const auto sim = api::simulate({{"seed", 1}});
  const auto inline_xy = api::bf({{"data", {{"x", sim.at("x")}, {"y", sim.at("y")}}}});
  const auto simulated = api::bf({{"data", {{"simulate", {{"seed", 1}}}}}});
  CHECK(inline_xy.at("methods") == r.at("methods"));
  CHECK(simulated.at("methods") == r.at("methods"));
}

TEST_CASE("handler validation names the field") {
  auto field_of = [](const auto& f) -> std::string {
    try {
      f();
    } catch (const Error& e) {
      CHECK(api::status_for(e) == 400);
      return e.field();
    }
    return "<no error>";
  };
  const json data = {{"csv", slope_csv()}};
  CHECK(field_of([&] { api::bf({{"data", data}, {"phi", 0.0}}); }) == "phi");
  CHECK(field_of([&] { api::bf({{"data", data}, {"phi", "one"}}); }) == "phi");
  CHECK(field_of([&] { api::bf({{"data", data}, {"b", -2}}); }) == "b");
  CHECK(field_of([&] { api::bf(json::object()); }) == "data");
  CHECK(field_of([&] { api::simulate({{"n", 2}}); }) == "n");
  CHECK(field_of([&] { api::parse_surface({{"data", data}, {"evaluator", "nope"}, {"grid", "phi:log10:-3:3:5"}}); }) ==
        "evaluator");
  CHECK(field_of([&] { api::parse_surface({{"data", data}, {"grid", "g:log10:-3:3:5"}}); }) == "g");
  CHECK(field_of([&] { api::parse_surface({{"data", data}}); }) == "grid");
  CHECK(field_of([&] { api::priors_density({{"phi", "0"}}); }) == "phi");
  CHECK(field_of([&] { api::priors_density({{"sigma", "1"}}); }) == "sigma");
  CHECK(field_of([&] { api::hlm_slices({{"hlm", {{"synthetic", {{"m", 20}}}}}, {"center", {{"zeta", 1}}}}); }) ==
        "center");
}

TEST_CASE("computation errors map to 422") {
  const std::string two_groups = "school,ses,mathscore\n1,0.1,50\n1,0.4,53\n1,0.2,49\n2,0.3,60\n2,0.1,58\n";
  try {
    api::hlm_slices({{"hlm", {{"csv", two_groups}}}});
    FAIL("expected error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::too_few_groups);
    CHECK(api::status_for(e) == 422);
    CHECK(api::error_body(e).at("error") == e.what());
  }
  CHECK(api::status_for(std::runtime_error("x")) == 500);
}

TEST_CASE("prior density curves") {
  const auto r = api::priors_density({{"mu", "1.5"}, {"phi", "4"}, {"a", "2"}, {"b", "3"}, {"points", "401"}});
  const auto& bx = r.at("beta").at("x");
  const auto& bd = r.at("beta").at("density");
  REQUIRE(bx.size() == 401);
  CHECK(bx[200].get<double>() == doctest::Approx(1.5));
  CHECK(bd[200].get<double>() == doctest::Approx(std::sqrt(4.0 / (2.0 * M_PI))));
  // gamma(2, rate 3): density 9 x exp(-3x); check a point and total mass
  const auto& gx = r.at("gamma").at("x");
  const auto& gd = r.at("gamma").at("density");
  const double x5 = gx[5].get<double>();
  CHECK(gd[5].get<double>() == doctest::Approx(9.0 * x5 * std::exp(-3.0 * x5)));
  double mass = 0.0;
  for (std::size_t i = 1; i < gx.size(); ++i)
    mass += 0.5 * (gd[i].get<double>() + gd[i - 1].get<double>()) * (gx[i].get<double>() - gx[i - 1].get<double>());
  CHECK(mass == doctest::Approx(0.995).epsilon(0.01));
}

TEST_CASE("hlm slices payload") {
  const auto r = api::hlm_slices({{"hlm", {{"synthetic", {{"seed", 1}, {"m", 20}}}}}, {"points", 5}});
  REQUIRE(r.at("slices").size() == 8);
  CHECK(r.at("groups") == 20);
  for (const auto& s : r.at("slices")) {
    CHECK(s.at("grid").size() == 5);
    CHECK(s.at("log_bf").size() == 5);
  }
  CHECK(r.at("csv").get<std::string>().rfind("hyper,grid_value,log_bf\n", 0) == 0);
  const auto g = r.at("center").at("g").get<double>();
  const auto moved = api::hlm_slices({{"hlm", {{"synthetic", {{"seed", 1}, {"m", 20}}}}}, {"points", 1},
                                      {"center", {{"g", 2 * g}}}});
  CHECK(moved.at("center").at("g").get<double>() == 2 * g);
  CHECK(moved.at("center").at("nu0") == r.at("center").at("nu0"));
}

TEST_CASE("box and fit artifacts") {
  const auto a = api::box_from_json("phi:log10:-3:1,mu:linear:-3:3");
  const auto b = api::box_from_json(api::box_to_json(a));
  REQUIRE(b.size() == 2);
  CHECK(b[0].lower == a[0].lower);
  CHECK(b[1].scale == design::Scale::linear);
  CHECK_THROWS_AS(api::box_from_json(3), Error);

  const auto job = api::parse_surface({{"data", {{"csv", slope_csv()}}}, {"grid", "phi:log10:-3:1:8,mu:linear:-3:3:6"}});
  const auto out = api::run_surface(job);
  const auto fit_req = json{{"surface_csv", out.csv}, {"box", "phi:log10:-3:1,mu:linear:-3:3"}, {"het", false}};
  const auto artifact = api::run_fit(api::parse_fit(fit_req));
  const auto [box, fit] = api::load_fit_artifact(artifact);
  CHECK(box.size() == 2);
  const auto p = api::predict({{"fit", json::parse(artifact)}, {"points", {{0.01, 2.0}, {1.0, -1.0}}}});
  CHECK(p.at("mean").size() == 2);
  CHECK(p.at("class").size() == 2);
  // same prediction from the artifact as a string
  CHECK(api::predict({{"fit", artifact}, {"points", {{0.01, 2.0}, {1.0, -1.0}}}}) == p);
  CHECK_THROWS_AS(api::predict({{"fit", artifact}, {"grid", "mu:linear:-3:3:4,phi:log10:-3:1:4"}}), Error);
  CHECK_THROWS_AS(api::parse_fit({{"surface_csv", out.csv}, {"box", "a:linear:0:1,b:linear:0:1"}}), Error);
  CHECK_THROWS_AS(api::load_fit_artifact("{}"), Error);
}

TEST_CASE("http service end to end") {
  const auto dir = scratch("http");
  const auto data = slope_csv();
  const json surface_req = {{"evaluator", "reg_closed"}, {"data", {{"csv", data}}},
                            {"grid", "phi:log10:-3:3:30,mu:linear:-3:3:30"}};
  std::string surface_csv, job_id;
  {
    Running srv(config_in(dir));
    auto& c = srv.client;

    auto h = c.Get("/v1/health");
    REQUIRE(h);
    CHECK(h->status == 200);

    auto r = srv.post("/v1/bf", {{"data", {{"csv", data}}}, {"mu", 0}, {"phi", 1}, {"a", 1}, {"b", 1}});
    REQUIRE(r);
    CHECK(r->status == 200);
    CHECK(json::parse(r->body).at("methods").size() == 4);

    r = srv.post("/v1/bf", {{"data", {{"csv", data}}}, {"phi", -1}});
    REQUIRE(r);
    CHECK(r->status == 400);
    CHECK(json::parse(r->body).at("field") == "phi");

    r = c.Post("/v1/bf", "{not json", "application/json");
    REQUIRE(r);
    CHECK(r->status == 400);
    CHECK(json::parse(r->body).at("field") == "body");

    r = srv.post("/v1/hlm/slices", {{"hlm", {{"csv", "school,ses,mathscore\n1,0,1\n1,1,2\n2,0,3\n2,1,5\n"}}}});
    REQUIRE(r);
    CHECK(r->status == 422);

    r = srv.post("/v1/simulate", {{"n", 30}, {"seed", 1}});
    REQUIRE(r);
    CHECK(json::parse(r->body).at("csv") == data);

    auto d = c.Get("/v1/priors/density?mu=0&phi=1&a=1&b=1");
    REQUIRE(d);
    CHECK(d->status == 200);
    d = c.Get("/v1/priors/density?phi=-3");
    REQUIRE(d);
    CHECK(d->status == 400);
    CHECK(json::parse(d->body).at("field") == "phi");

    // async sweep
    r = srv.post("/v1/surface", surface_req);
    REQUIRE(r);
    CHECK(r->status == 202);
    job_id = json::parse(r->body).at("job_id");
    const auto done = srv.wait(job_id);
    CHECK(done.at("status") == "done");
    CHECK(done.at("progress") == 1.0);
    auto res = c.Get("/v1/jobs/" + job_id + "/result");
    REQUIRE(res);
    CHECK(res->status == 200);
    surface_csv = res->body;
    CHECK(std::count(surface_csv.begin(), surface_csv.end(), '\n') == 901);
    res = c.Get("/v1/jobs/" + job_id + "/result?format=json");
    REQUIRE(res);
    CHECK(json::parse(res->body).at("samples").size() == 900);
    res = c.Get("/v1/jobs/" + job_id + "/result?format=manifest");
    REQUIRE(res);
    CHECK(json::parse(res->body).at("samples") == 900);

    // the same request maps to the same job
    r = srv.post("/v1/surface", surface_req);
    REQUIRE(r);
    CHECK(json::parse(r->body).at("job_id") == job_id);
    CHECK(json::parse(r->body).at("status") == "done");

    r = srv.post("/v1/surface", {{"evaluator", "reg_closed"}, {"data", {{"csv", data}}}, {"grid", "phi:log10:3:-3:5"}});
    REQUIRE(r);
    CHECK(r->status == 400);

    auto missing = c.Get("/v1/jobs/0123456789abcdef");
    REQUIRE(missing);
    CHECK(missing->status == 404);
    missing = c.Get("/v1/jobs/0123456789abcdef/result");
    REQUIRE(missing);
    CHECK(missing->status == 404);

    // every point fails: job fails, result reports the computation error
    r = srv.post("/v1/surface", {{"evaluator", "reg_fractional"}, {"data", {{"csv", data}}},
                                 {"grid", "m:linear:31:40:3"}});
    REQUIRE(r);
    CHECK(r->status == 202);
    const auto failed = srv.wait(json::parse(r->body).at("job_id"));
    CHECK(failed.at("status") == "failed");
    res = c.Get("/v1/jobs/" + failed.at("job_id").get<std::string>() + "/result");
    REQUIRE(res);
    CHECK(res->status == 422);

    // noisy sweep, surrogate fit on it, prediction from the fit job
    r = srv.post("/v1/surface", {{"evaluator", "reg_noisy"}, {"data", {{"csv", data}}}, {"n_draws", 2000},
                                 {"grid", "phi:log10:-3:1:20"}, {"replicates", 5}, {"seed", 3}});
    REQUIRE(r);
    const std::string noisy_id = json::parse(r->body).at("job_id");
    CHECK(srv.wait(noisy_id).at("status") == "done");
    r = srv.post("/v1/surrogate/fit", {{"surface_job", noisy_id}, {"het", true}});
    REQUIRE(r);
    CHECK(r->status == 202);
    const std::string fit_id = json::parse(r->body).at("job_id");
    CHECK(srv.wait(fit_id).at("status") == "done");
    r = srv.post("/v1/surrogate/predict", {{"fit_job", fit_id}, {"grid", "phi:log10:-3:1:60"}});
    REQUIRE(r);
    CHECK(r->status == 200);
    const auto pred = json::parse(r->body);
    CHECK(pred.at("mean").size() == 60);
    CHECK(pred.at("sd_obs").size() == 60);
    r = srv.post("/v1/surrogate/predict", {{"fit_job", "0123456789abcdef"}, {"grid", "phi:log10:-3:1:6"}});
    REQUIRE(r);
    CHECK(r->status == 400);
    r = srv.post("/v1/surrogate/fit", {{"surface_job", "0123456789abcdef"}});
    REQUIRE(r);
    CHECK(r->status == 400);
  }

  // a new process over the same directory still serves the finished job
  {
    Running srv(config_in(dir));
    const auto rec = srv.client.Get("/v1/jobs/" + job_id);
    REQUIRE(rec);
    CHECK(rec->status == 200);
    CHECK(json::parse(rec->body).at("status") == "done");
    const auto res = srv.client.Get("/v1/jobs/" + job_id + "/result");
    REQUIRE(res);
    CHECK(res->body == surface_csv);
    CHECK(srv.service.store().size() >= 4);
  }

  // and the CLI export of the same sweep is byte-identical
  csv::write_file((dir / "data.csv").string(), data);
  int code = -1;
  run_cli("surface --evaluator reg_closed --data " + (dir / "data.csv").string() +
              " --grid phi:log10:-3:3:30,mu:linear:-3:3:30 --out " + (dir / "cli.csv").string(),
          &code);
  CHECK(code == 0);
  CHECK(csv::read_file((dir / "cli.csv").string()) == surface_csv);
  fs::remove_all(dir);
}

TEST_CASE("unfinished jobs are queued again after a restart") {
  const auto dir = scratch("requeue");
  const json req = {{"evaluator", "reg_closed"}, {"data", {{"simulate", {{"seed", 2}}}}}, {"grid", "phi:log10:-2:2:4"}};
  const auto id = jobs::JobStore::job_id("surface", req);
  fs::create_directories(dir / "jobs" / id);
  jobs::write_atomic(dir / "jobs" / id / "request.json", req.dump());
  jobs::write_atomic(dir / "jobs" / id / "record.json",
                     json{{"job_id", id}, {"kind", "surface"}, {"status", "running"}}.dump());
  fs::create_directories(dir / "jobs" / "not-a-job");
  Running srv(config_in(dir));
  CHECK(srv.wait(id).at("status") == "done");
  const auto res = srv.client.Get("/v1/jobs/" + id + "/result");
  REQUIRE(res);
  CHECK(std::count(res->body.begin(), res->body.end(), '\n') == 5);
  fs::remove_all(dir);
}

TEST_CASE("static bundle and environment fallbacks") {
  const auto dir = scratch("static");
  fs::create_directories(dir / "ui");
  csv::write_file((dir / "ui" / "index.html").string(), "<html>explorer</html>");
  auto cfg = config_in(dir / "data");
  cfg.static_dir = dir / "ui";
  {
    Running srv(cfg);
    const auto r = srv.client.Get("/index.html");
    REQUIRE(r);
    CHECK(r->body == "<html>explorer</html>");
  }
  ::setenv("BFSURF_PORT", "9123", 1);
  ::setenv("BFSURF_WORKERS", "3", 1);
  ::setenv("BFSURF_DATA_DIR", "/tmp/somewhere", 1);
  auto e = server::with_env_fallbacks({}, false, false, false, true);
  CHECK(e.port == 9123);
  CHECK(e.workers == 3);
  CHECK(e.data_dir == "/tmp/somewhere");
  server::ServerConfig flags;
  flags.port = 7000;
  e = server::with_env_fallbacks(flags, true, false, false, true);
  CHECK(e.port == 7000);
  ::setenv("BFSURF_WORKERS", "zero", 1);
  CHECK_THROWS_AS(server::with_env_fallbacks({}, false, false, false, true), Error);
  ::unsetenv("BFSURF_PORT");
  ::unsetenv("BFSURF_WORKERS");
  ::unsetenv("BFSURF_DATA_DIR");
  fs::remove_all(dir);
}

TEST_CASE("cli exit codes and pipeline") {
  const auto dir = scratch("cli");
  const auto p = [&](const char* f) { return (dir / f).string(); };
  int code = -1;
  run_cli("simulate --n 30 --beta 2.5 --sigma2 1 --seed 1 --out " + p("data.csv"), &code);
  CHECK(code == 0);
  CHECK(csv::read_file(p("data.csv")) == slope_csv());
  run_cli("bf --data " + p("data.csv") + " --mu 0 --phi 1 --a 1 --b 1", &code);
  CHECK(code == 0);
  run_cli("bf --data " + p("data.csv") + " --json", &code, p("bf.json"));
  CHECK(code == 0);
  CHECK(json::parse(csv::read_file(p("bf.json"))) == api::bf({{"data", {{"csv", slope_csv()}}}, {"fractional_m", 3}}));
  run_cli("bf --data " + p("data.csv") + " --phi 0", &code);
  CHECK(code == 2);
  run_cli("bf --nonsense", &code);
  CHECK(code == 2);
  run_cli("frobnicate", &code);
  CHECK(code == 2);
  run_cli("slices --synthetic-hlm 1 --groups 2", &code);
  CHECK(code == 2);

  const std::string two_groups = "school,ses,mathscore\n1,0.1,50\n1,0.4,53\n2,0.3,60\n2,0.1,58\n";
  csv::write_file(p("two.csv"), two_groups);
  run_cli("slices --hlm-data " + p("two.csv"), &code);
  CHECK(code == 1);

  run_cli("surface --evaluator reg_noisy --data " + p("data.csv") +
              " --grid phi:log10:-3:1:10 --replicates 4 --n-draws 2000 --out " + p("noisy.csv"),
          &code);
  CHECK(code == 0);
  CHECK(fs::exists(p("noisy.manifest.json")));
  run_cli("fit --in " + p("noisy.csv") + " --het --out " + p("fit.json"), &code);
  CHECK(code == 0);
  run_cli("predict --fit " + p("fit.json") + " --grid phi:log10:-3:1:7 --out " + p("pred.csv"), &code);
  CHECK(code == 0);
  const auto pred = csv::parse(csv::read_file(p("pred.csv")));
  CHECK(pred.header == std::vector<std::string>{"phi", "mean", "sd_mean", "sd_obs"});
  CHECK(pred.rows.size() == 7);
  run_cli("coverage --fit " + p("fit.json") + " --holdout " + p("noisy.csv"), &code);
  CHECK(code == 0);
  run_cli("design --lhs-box g:log10:0:2,nu0:log10:-1:1 --n 12 --format json --out " + p("d.json"), &code);
  CHECK(code == 0);
  CHECK(design::design_from_json(csv::read_file(p("d.json"))).locations() == 12);
  run_cli("surface --evaluator hlm --synthetic-hlm 1 --groups 20 --design " + p("d.json") + " --out " + p("h.csv"),
          &code);
  CHECK(code == 0);
  CHECK(surface::surface_from_csv(csv::read_file(p("h.csv"))).samples.size() == 12);
  fs::remove_all(dir);
}
