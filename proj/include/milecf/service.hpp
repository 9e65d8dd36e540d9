#pragma once

#include <chrono>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <thread>
#include <vector>

#include "milecf/evaluation.hpp"

namespace milecf::service {

struct ServiceConfig {
  std::filesystem::path data_dir = "milecf-data";
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  unsigned explain_workers = 2;
  std::chrono::milliseconds explain_timeout{30000};
  std::string cors_origin = "*";
  std::vector<std::string> milestones = eval::SuiteConfig{}.milestones;
};

/// A trained model with the knowledge bank built from its training split.
struct ModelSnapshot {
  std::string id;
  std::string log_id;
  NextActivityModel model;
  KnowledgeBank bank;
};

struct JobStatus {
  enum class State { kQueued, kRunning, kDone, kFailed };

  std::string id;
  std::string model_id;
  std::string log_id;
  State state = State::kQueued;
  int epochs_done = 0;
  std::vector<double> epoch_losses;
  std::optional<EvalReport> report;
  std::string error_code;
  std::string error_message;

  json to_json() const;
};

const char* to_string(JobStatus::State s);

/// Logs, models, job statuses and reports. Readers share, writers are
/// exclusive. Logs, models and reports are mirrored under the data directory
/// and reloaded on construction.
class SessionStore {
 public:
  explicit SessionStore(std::filesystem::path data_dir);

  std::string add_log(EventLog log);
  std::shared_ptr<const EventLog> log(const std::string& id) const;

  /// Registers a queued training job and reserves its model id.
  JobStatus create_job(const std::string& log_id);
  void update_job(const JobStatus& status);
  std::optional<JobStatus> job(const std::string& id) const;

  /// Persists the checkpoint and publishes the model under `model_id`.
  std::shared_ptr<const ModelSnapshot> add_model(const std::string& model_id, const std::string& log_id,
                                                 NextActivityModel model);
  std::shared_ptr<const ModelSnapshot> model(const std::string& id) const;
  /// True for ids that belong to a queued or running job.
  bool model_pending(const std::string& id) const;

  void put_report(const std::string& model_id, json report);
  std::optional<json> report(const std::string& model_id) const;

  std::vector<std::string> log_ids() const;
  std::vector<std::string> model_ids() const;

 private:
  std::string next_id(const char* prefix, std::size_t& counter);
  void load();

  std::filesystem::path dir_;
  mutable std::shared_mutex mutex_;
  std::map<std::string, std::shared_ptr<const EventLog>> logs_;
  std::map<std::string, std::shared_ptr<const ModelSnapshot>> models_;
  std::map<std::string, JobStatus> jobs_;
  std::map<std::string, json> reports_;
  std::size_t log_counter_ = 0;
  std::size_t model_counter_ = 0;
  std::size_t job_counter_ = 0;
};

/// Builds the snapshot for a model trained on `log` (the bank is the same
/// case split the trainer used).
std::shared_ptr<const ModelSnapshot> make_snapshot(std::string id, std::string log_id, const EventLog& log,
                                                   NextActivityModel model);

/// JSON over HTTP. Training runs on one background worker; explain and report
/// requests share a bounded number of worker slots.
class Server {
 public:
  explicit Server(ServiceConfig config);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  /// Binds and serves on a background thread. Returns the bound port.
  int start();
  /// Binds and serves on the calling thread until stop().
  void run();
  void stop();

  SessionStore& store() { return store_; }

 private:
  struct Impl;
  void train_loop();

  ServiceConfig config_;
  SessionStore store_;
  std::unique_ptr<Impl> impl_;
  std::thread listener_;
  std::thread trainer_;
  std::mutex queue_mutex_;
  std::condition_variable queue_cv_;
  std::deque<std::pair<std::string, ModelConfig>> queue_;  // job id, config
  bool stopping_ = false;
};

}  // namespace milecf::service
