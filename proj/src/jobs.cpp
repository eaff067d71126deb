#include "bfsurf/jobs.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "bfsurf/api.hpp"
#include "bfsurf/errors.hpp"
#include "bfsurf/version.hpp"

namespace bfsurf::jobs {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::optional<std::string> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) return std::nullopt;
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Status status_from(std::string_view s) {
  for (auto st : {Status::queued, Status::running, Status::done, Status::failed})
    if (to_string(st) == s) return st;
  throw Error(Errc::parse_error, "unknown job status");
}

bool valid_id(const std::string& id) {
  if (id.size() != 16) return false;
  for (char c : id)
    if (!((c >= '0' && c <= '9') || (c >= 'a' && c <= 'f'))) return false;
  return true;
}

}  // namespace

std::string_view to_string(Status s) {
  switch (s) {
    case Status::queued: return "queued";
    case Status::running: return "running";
    case Status::done: return "done";
    case Status::failed: return "failed";
  }
  return "?";
}

void write_atomic(const fs::path& path, std::string_view contents) {
  const auto tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::invalid_argument, "cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  }
  fs::rename(tmp, path);
}

JobStore::JobStore(fs::path root, int workers, std::map<std::string, Runner> runners)
    : root_(std::move(root)), runners_(std::move(runners)) {
  fs::create_directories(root_ / "jobs");
  for (const auto& entry : fs::directory_iterator(root_ / "jobs")) {
    if (!entry.is_directory() || !valid_id(entry.path().filename().string())) continue;
    const auto rec = slurp(entry.path() / "record.json");
    if (!rec || !fs::exists(entry.path() / "request.json")) continue;
    try {
      const auto j = json::parse(*rec);
      JobRecord r;
      r.id = j.at("job_id").get<std::string>();
      r.kind = j.at("kind").get<std::string>();
      r.status = status_from(j.at("status").get<std::string>());
      r.error = j.value("error", "");
      r.http_status = j.value("http_status", 0);
      if (r.id != entry.path().filename().string() || !runners_.count(r.kind)) continue;
      if (r.status == Status::done) r.progress = 1.0;
      if (r.status == Status::queued || r.status == Status::running) {
        // interrupted by a restart: run it again
        r.status = Status::queued;
        queue_.push_back(r.id);
      }
      index_[r.id] = r;
    } catch (const std::exception&) {
      // unreadable record; leave the directory alone
    }
  }
  for (int i = 0; i < std::max(workers, 1); ++i) threads_.emplace_back([this] { worker(); });
}

JobStore::~JobStore() {
  {
    std::lock_guard lk(mu_);
    stopping_ = true;
  }
  cv_.notify_all();
  for (auto& t : threads_) t.join();
}

std::string JobStore::job_id(const std::string& kind, const json& request) {
  // object keys are sorted by nlohmann::json, so dump() is canonical
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a(kind + "\n" + request.dump())));
  return buf;
}

void JobStore::persist(const JobRecord& r) const {
  json j;
  j["job_id"] = r.id;
  j["kind"] = r.kind;
  j["status"] = to_string(r.status);
  if (!r.error.empty()) j["error"] = r.error;
  if (r.http_status) j["http_status"] = r.http_status;
  write_atomic(dir_of(r.id) / "record.json", j.dump(2));
}

JobRecord JobStore::submit(const std::string& kind, const json& request) {
  if (!runners_.count(kind)) throw Error(Errc::invalid_argument, "unknown job kind '" + kind + "'", "kind");
  const auto id = job_id(kind, request);
  std::lock_guard lk(mu_);
  if (auto it = index_.find(id); it != index_.end() && it->second.status != Status::failed) return it->second;
  fs::create_directories(dir_of(id));
  write_atomic(dir_of(id) / "request.json", request.dump(2));
  JobRecord r;
  r.id = id;
  r.kind = kind;
  persist(r);
  index_[id] = r;
  queue_.push_back(id);
  cv_.notify_one();
  return r;
}

std::optional<JobRecord> JobStore::get(const std::string& id) const {
  std::lock_guard lk(mu_);
  const auto it = index_.find(id);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::optional<std::string> JobStore::artifact(const std::string& id, const std::string& file) const {
  if (file.find('/') != std::string::npos || file.find("..") != std::string::npos) return std::nullopt;
  {
    std::lock_guard lk(mu_);
    const auto it = index_.find(id);
    if (it == index_.end() || it->second.status != Status::done) return std::nullopt;
  }
  return slurp(dir_of(id) / file);
}

std::optional<JobRecord> JobStore::wait(const std::string& id, double timeout_seconds) const {
  std::unique_lock lk(mu_);
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(timeout_seconds);
  done_cv_.wait_until(lk, deadline, [&] {
    const auto it = index_.find(id);
    return it == index_.end() || it->second.status == Status::done || it->second.status == Status::failed;
  });
  const auto it = index_.find(id);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::size_t JobStore::size() const {
  std::lock_guard lk(mu_);
  return index_.size();
}

void JobStore::worker() {
  while (true) {
    std::string id;
    JobRecord rec;
    {
      std::unique_lock lk(mu_);
      cv_.wait(lk, [&] { return stopping_ || !queue_.empty(); });
      if (stopping_) return;
      id = queue_.front();
      queue_.pop_front();
      auto& r = index_.at(id);
      r.status = Status::running;
      r.progress = 0.0;
      persist(r);
      rec = r;
    }
    std::string error;
    int http = 0;
    try {
      const auto request = json::parse(slurp(dir_of(id) / "request.json").value_or("null"));
      runners_.at(rec.kind)(request, dir_of(id), [&](double p) {
        std::lock_guard lk(mu_);
        index_.at(id).progress = p;
      });
    } catch (const std::exception& e) {
      error = e.what();
      http = api::status_for(e);
    }
    {
      std::lock_guard lk(mu_);
      auto& r = index_.at(id);
      r.status = error.empty() ? Status::done : Status::failed;
      r.error = error;
      r.http_status = http;
      if (error.empty()) r.progress = 1.0;
      persist(r);
    }
    done_cv_.notify_all();
  }
}

}  // namespace bfsurf::jobs
