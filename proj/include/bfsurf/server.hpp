#pragma once

#include <filesystem>
#include <memory>
#include <string>

#include "bfsurf/jobs.hpp"

namespace bfsurf::server {

struct ServerConfig {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  std::filesystem::path data_dir = "bfsurf-data";
  int workers = 2;
  /// Built UI bundle served under /; nothing is mounted when empty or missing.
  std::filesystem::path static_dir;
};

/// Fills fields the caller left at their defaults from BFSURF_PORT,
/// BFSURF_DATA_DIR, BFSURF_WORKERS and BFSURF_STATIC_DIR.
ServerConfig with_env_fallbacks(ServerConfig cfg, bool port_set, bool dir_set, bool workers_set, bool static_set);

/// The /v1 JSON service over a persistent job store.
class Service {
 public:
  explicit Service(ServerConfig cfg);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Binds the listening socket and returns the port.
  int bind();
  /// Serves until stop(); call bind() first.
  void run();
  void stop();

  jobs::JobStore& store();
  const ServerConfig& config() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace bfsurf::server
