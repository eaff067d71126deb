#include "bfsurf/server.hpp"

#include <algorithm>
#include <cstdlib>

#include <omp.h>

#include "bfsurf/api.hpp"
#include "bfsurf/errors.hpp"
#include "bfsurf/version.hpp"

// after Eigen: <resolv.h> defines a _res macro that clashes with Eigen parameter names
#include <httplib.h>

namespace bfsurf::server {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char* kJson = "application/json";

void reply(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), kJson);
}

json body_of(const httplib::Request& req) {
  try {
    return json::parse(req.body);
  } catch (const json::exception&) {
    throw Error(Errc::invalid_argument, "request body is not valid JSON", "body");
  }
}

// Runs a handler, mapping exceptions to 400/422/500 with the error text.
template <class F>
httplib::Server::Handler guarded(F f) {
  return [f](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const std::exception& e) {
      reply(res, api::status_for(e), api::error_body(e));
    }
  };
}

json record_json(const jobs::JobRecord& r) {
  json j;
  j["job_id"] = r.id;
  j["kind"] = r.kind;
  j["status"] = jobs::to_string(r.status);
  j["progress"] = r.progress;
  if (r.status == jobs::Status::done) j["result"] = "/v1/jobs/" + r.id + "/result";
  if (!r.error.empty()) j["error"] = r.error;
  return j;
}

const char* env(const char* name) {
  const char* v = std::getenv(name);
  return v && *v ? v : nullptr;
}

}  // namespace

ServerConfig with_env_fallbacks(ServerConfig cfg, bool port_set, bool dir_set, bool workers_set, bool static_set) {
  try {
    if (!port_set)
      if (const char* v = env("BFSURF_PORT")) cfg.port = std::stoi(v);
    if (!workers_set)
      if (const char* v = env("BFSURF_WORKERS")) cfg.workers = std::stoi(v);
  } catch (const std::exception&) {
    throw Error(Errc::invalid_argument, "BFSURF_PORT and BFSURF_WORKERS must be integers", "env");
  }
  if (!dir_set)
    if (const char* v = env("BFSURF_DATA_DIR")) cfg.data_dir = v;
  if (!static_set)
    if (const char* v = env("BFSURF_STATIC_DIR")) cfg.static_dir = v;
  if (cfg.port < 0 || cfg.port > 65535) throw Error(Errc::invalid_argument, "port out of range", "port");
  if (cfg.workers < 1) throw Error(Errc::invalid_argument, "workers must be at least 1", "workers");
  return cfg;
}

struct Service::Impl {
  ServerConfig cfg;
  httplib::Server http;
  std::unique_ptr<jobs::JobStore> store;
  int port = -1;

  std::string lookup(const std::string& id, const std::string& file) const {
    const auto rec = store->get(id);
    if (!rec) throw Error(Errc::invalid_argument, "unknown job '" + id + "'", "job");
    if (rec->status != jobs::Status::done)
      throw Error(Errc::invalid_argument, "job '" + id + "' is not done", "job");
    if (auto a = store->artifact(id, file)) return *a;
    throw Error(Errc::invalid_argument, "job '" + id + "' has no " + file, "job");
  }

  explicit Impl(ServerConfig c) : cfg(std::move(c)) {
    const int per_job = std::max(1, omp_get_max_threads() / cfg.workers);
    std::map<std::string, jobs::Runner> runners;
    runners["surface"] = [per_job](const json& req, const fs::path& dir, const std::function<void(double)>& progress) {
      const auto job = api::parse_surface(req);
      const auto out = api::run_surface(job, per_job, [&](std::size_t done, std::size_t total) {
        progress(static_cast<double>(done) / static_cast<double>(total));
      });
      jobs::write_atomic(dir / "result.csv", out.csv);
      jobs::write_atomic(dir / "result.json", out.json);
      jobs::write_atomic(dir / "manifest.json", out.manifest);
    };
    runners["fit"] = [this](const json& req, const fs::path& dir, const std::function<void(double)>&) {
      const auto job = api::parse_fit(req, [this](const std::string& id, const std::string& f) { return lookup(id, f); });
      jobs::write_atomic(dir / "result.json", api::run_fit(job));
    };
    store = std::make_unique<jobs::JobStore>(cfg.data_dir, cfg.workers, std::move(runners));
    routes();
  }

  void routes() {
    http.set_payload_max_length(256u << 20);
    http.set_default_headers({{"Access-Control-Allow-Origin", "*"}});

    http.Get("/v1/health", guarded([](const httplib::Request&, httplib::Response& res) {
      reply(res, 200, {{"status", "ok"}, {"version", kVersion}});
    }));
    http.Post("/v1/simulate", guarded([](const httplib::Request& req, httplib::Response& res) {
      reply(res, 200, api::simulate(body_of(req)));
    }));
    http.Post("/v1/bf", guarded([](const httplib::Request& req, httplib::Response& res) {
      reply(res, 200, api::bf(body_of(req)));
    }));
    http.Post("/v1/hlm/slices", guarded([](const httplib::Request& req, httplib::Response& res) {
      reply(res, 200, api::hlm_slices(body_of(req)));
    }));
    http.Get("/v1/priors/density", guarded([](const httplib::Request& req, httplib::Response& res) {
      std::map<std::string, std::string> q;
      for (const auto& [k, v] : req.params) q[k] = v;
      reply(res, 200, api::priors_density(q));
    }));
    http.Post("/v1/surrogate/predict", guarded([this](const httplib::Request& req, httplib::Response& res) {
      reply(res, 200, api::predict(body_of(req), [this](const std::string& id, const std::string& f) {
              return lookup(id, f);
            }));
    }));
    http.Post("/v1/surface", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto body = body_of(req);
      (void)api::parse_surface(body);  // reject bad requests before queueing
      reply(res, 202, record_json(store->submit("surface", body)));
    }));
    http.Post("/v1/surrogate/fit", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto body = body_of(req);
      (void)api::parse_fit(body, [this](const std::string& id, const std::string& f) { return lookup(id, f); });
      reply(res, 202, record_json(store->submit("fit", body)));
    }));
    http.Get(R"(/v1/jobs/([0-9a-zA-Z]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto rec = store->get(req.matches[1]);
      if (!rec) return reply(res, 404, {{"error", "unknown job"}, {"field", "job_id"}});
      reply(res, 200, record_json(*rec));
    }));
    http.Get(R"(/v1/jobs/([0-9a-zA-Z]+)/result)", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      const auto rec = store->get(id);
      if (!rec) return reply(res, 404, {{"error", "unknown job"}, {"field", "job_id"}});
      if (rec->status == jobs::Status::failed)
        return reply(res, rec->http_status ? rec->http_status : 422, {{"error", rec->error}});
      if (rec->status != jobs::Status::done) return reply(res, 409, record_json(*rec));
      const auto format = req.has_param("format") ? req.get_param_value("format") : std::string{};
      std::string file = "result.json", type = kJson;
      if (rec->kind == "surface") {
        if (format.empty() || format == "csv") file = "result.csv", type = "text/csv";
        else if (format == "manifest") file = "manifest.json";
        else if (format != "json") return reply(res, 400, {{"error", "format must be csv, json or manifest"}, {"field", "format"}});
      }
      const auto body = store->artifact(id, file);
      if (!body) return reply(res, 500, {{"error", "result file missing"}});
      res.status = 200;
      res.set_content(*body, type);
    }));

    if (!cfg.static_dir.empty() && fs::is_directory(cfg.static_dir)) {
      http.set_mount_point("/", cfg.static_dir.string());
    } else {
      http.Get("/", [](const httplib::Request&, httplib::Response& res) {
        reply(res, 200, {{"service", "bfsurf"}, {"version", kVersion}, {"api", "/v1"}});
      });
    }
  }
};

Service::Service(ServerConfig cfg) : impl_(std::make_unique<Impl>(std::move(cfg))) {}
Service::~Service() { stop(); }

int Service::bind() {
  auto& i = *impl_;
  i.port = i.cfg.port == 0 ? i.http.bind_to_any_port(i.cfg.host) : (i.http.bind_to_port(i.cfg.host, i.cfg.port) ? i.cfg.port : -1);
  if (i.port < 0) throw Error(Errc::invalid_argument, "cannot bind " + i.cfg.host + ":" + std::to_string(i.cfg.port), "port");
  return i.port;
}

void Service::run() { impl_->http.listen_after_bind(); }
void Service::stop() {
  if (impl_) impl_->http.stop();
}
jobs::JobStore& Service::store() { return *impl_->store; }
const ServerConfig& Service::config() const { return impl_->cfg; }

}  // namespace bfsurf::server
