#pragma once

#include <condition_variable>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

namespace bfsurf::jobs {

enum class Status { queued, running, done, failed };
std::string_view to_string(Status s);

struct JobRecord {
  std::string id;
  std::string kind;  // "surface" or "fit"
  Status status = Status::queued;
  double progress = 0.0;
  std::string error;
  int http_status = 0;  // for failed jobs: 400 or 422
};

/// Work for one job: reads the stored request, writes its artifacts into the
/// directory, and reports progress in [0, 1].
using Runner = std::function<void(const nlohmann::json& request, const std::filesystem::path& dir,
                                  const std::function<void(double)>& progress)>;

/// Content-addressed job store with a fixed worker pool. A job id is the
/// FNV-1a hash of kind and request, so a repeated request maps to the same
/// job and its cached result. Each job lives in <root>/jobs/<id>/ with
/// request.json, record.json and its artifacts; the in-memory index is
/// rebuilt from those directories on startup, and unfinished jobs are queued
/// again.
class JobStore {
 public:
  JobStore(std::filesystem::path root, int workers, std::map<std::string, Runner> runners);
  ~JobStore();
  JobStore(const JobStore&) = delete;
  JobStore& operator=(const JobStore&) = delete;

  static std::string job_id(const std::string& kind, const nlohmann::json& request);

  /// Queues the request unless an identical one is queued, running or done.
  JobRecord submit(const std::string& kind, const nlohmann::json& request);
  std::optional<JobRecord> get(const std::string& id) const;
  /// Contents of an artifact file of a finished job.
  std::optional<std::string> artifact(const std::string& id, const std::string& file) const;
  /// Blocks until the job finishes or the timeout passes.
  std::optional<JobRecord> wait(const std::string& id, double timeout_seconds) const;

  std::size_t size() const;

 private:
  void worker();
  void persist(const JobRecord& r) const;
  std::filesystem::path dir_of(const std::string& id) const { return root_ / "jobs" / id; }

  std::filesystem::path root_;
  std::map<std::string, Runner> runners_;
  mutable std::mutex mu_;
  mutable std::condition_variable cv_;       // queue
  mutable std::condition_variable done_cv_;  // finished jobs
  std::map<std::string, JobRecord> index_;
  std::deque<std::string> queue_;
  bool stopping_ = false;
  std::vector<std::thread> threads_;
};

/// Writes via a temporary file and rename so readers never see partial files.
void write_atomic(const std::filesystem::path& path, std::string_view contents);

}  // namespace bfsurf::jobs
