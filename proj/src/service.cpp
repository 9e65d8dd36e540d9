#include "milecf/service.hpp"

#include <httplib.h>

#include <algorithm>
#include <fstream>
#include <semaphore>

#include "milecf/synthgen.hpp"

namespace milecf::service {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Jobs

const char* to_string(JobStatus::State s) {
  switch (s) {
    case JobStatus::State::kQueued:
      return "queued";
    case JobStatus::State::kRunning:
      return "running";
    case JobStatus::State::kDone:
      return "done";
    case JobStatus::State::kFailed:
      return "failed";
  }
  return "failed";
}

json JobStatus::to_json() const {
  json j{{"job_id", id},
         {"model_id", model_id},
         {"log_id", log_id},
         {"state", to_string(state)},
         {"epochs_done", epochs_done},
         {"epoch_losses", epoch_losses}};
  if (report) j["metrics"] = report->to_json();
  if (state == State::kFailed) j["error"] = {{"code", error_code}, {"message", error_message}};
  return j;
}

// ---------------------------------------------------------------------------
// Store

namespace {

void write_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw InvalidArgument("cannot write " + tmp.string());
    out << text;
  }
  fs::rename(tmp, path);
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  return json::parse(in);
}

// Numeric suffix of ids like "log-12".
std::size_t id_number(const std::string& id) {
  const auto dash = id.rfind('-');
  if (dash == std::string::npos) return 0;
  try {
    return std::stoul(id.substr(dash + 1));
  } catch (const std::exception&) {
    return 0;
  }
}

}  // namespace

std::shared_ptr<const ModelSnapshot> make_snapshot(std::string id, std::string log_id, const EventLog& log,
                                                   NextActivityModel model) {
  const auto& cfg = model.config();
  const auto split = split_train_test(log, cfg.test_fraction, cfg.seed);
  KnowledgeBank bank(split.first.cases, model.vocab());
  return std::make_shared<const ModelSnapshot>(
      ModelSnapshot{std::move(id), std::move(log_id), std::move(model), std::move(bank)});
}

SessionStore::SessionStore(fs::path data_dir) : dir_(std::move(data_dir)) {
  for (const char* sub : {"logs", "models", "reports"}) fs::create_directories(dir_ / sub);
  load();
}

void SessionStore::load() {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir_ / "logs")) {
    if (e.path().extension() == ".json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& p : files) {
    const std::string id = p.stem().string();
    logs_[id] = std::make_shared<const EventLog>(event_log_from_json(read_json(p)));
    log_counter_ = std::max(log_counter_, id_number(id));
  }
  files.clear();
  for (const auto& e : fs::directory_iterator(dir_ / "models")) {
    if (e.path().extension() == ".json" && e.path().stem().extension() == ".meta") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& meta_path : files) {
    const std::string id = meta_path.stem().stem().string();
    const auto meta = read_json(meta_path);
    const std::string log_id = meta.at("log_id");
    const auto log = logs_.find(log_id);
    if (log == logs_.end()) continue;
    auto model = NextActivityModel::load(dir_ / "models" / (id + ".ckpt.json"));
    models_[id] = make_snapshot(id, log_id, *log->second, std::move(model));
    model_counter_ = std::max(model_counter_, id_number(id));
  }
  for (const auto& e : fs::directory_iterator(dir_ / "reports")) {
    if (e.path().extension() == ".json") reports_[e.path().stem().string()] = read_json(e.path());
  }
}

std::string SessionStore::next_id(const char* prefix, std::size_t& counter) {
  return std::string(prefix) + "-" + std::to_string(++counter);
}

std::string SessionStore::add_log(EventLog log) {
  std::unique_lock lock(mutex_);
  const std::string id = next_id("log", log_counter_);
  write_atomic(dir_ / "logs" / (id + ".json"), milecf::to_json(log).dump());
  logs_[id] = std::make_shared<const EventLog>(std::move(log));
  return id;
}

std::shared_ptr<const EventLog> SessionStore::log(const std::string& id) const {
  std::shared_lock lock(mutex_);
  const auto it = logs_.find(id);
  return it == logs_.end() ? nullptr : it->second;
}

JobStatus SessionStore::create_job(const std::string& log_id) {
  std::unique_lock lock(mutex_);
  JobStatus s;
  s.id = next_id("job", job_counter_);
  s.model_id = next_id("model", model_counter_);
  s.log_id = log_id;
  jobs_[s.id] = s;
  return s;
}

void SessionStore::update_job(const JobStatus& status) {
  std::unique_lock lock(mutex_);
  jobs_[status.id] = status;
}

std::optional<JobStatus> SessionStore::job(const std::string& id) const {
  std::shared_lock lock(mutex_);
  const auto it = jobs_.find(id);
  if (it == jobs_.end()) return std::nullopt;
  return it->second;
}

std::shared_ptr<const ModelSnapshot> SessionStore::add_model(const std::string& model_id, const std::string& log_id,
                                                             NextActivityModel model) {
  const auto log = this->log(log_id);
  if (!log) throw InvalidArgument("unknown log " + log_id);
  auto snapshot = make_snapshot(model_id, log_id, *log, std::move(model));
  std::unique_lock lock(mutex_);
  write_atomic(dir_ / "models" / (model_id + ".ckpt.json"), snapshot->model.to_json().dump(1));
  write_atomic(dir_ / "models" / (model_id + ".meta.json"), json{{"log_id", log_id}}.dump());
  models_[model_id] = snapshot;
  return snapshot;
}

std::shared_ptr<const ModelSnapshot> SessionStore::model(const std::string& id) const {
  std::shared_lock lock(mutex_);
  const auto it = models_.find(id);
  return it == models_.end() ? nullptr : it->second;
}

bool SessionStore::model_pending(const std::string& id) const {
  std::shared_lock lock(mutex_);
  return std::any_of(jobs_.begin(), jobs_.end(), [&](const auto& kv) {
    const auto& j = kv.second;
    return j.model_id == id && (j.state == JobStatus::State::kQueued || j.state == JobStatus::State::kRunning);
  });
}

void SessionStore::put_report(const std::string& model_id, json report) {
  std::unique_lock lock(mutex_);
  write_atomic(dir_ / "reports" / (model_id + ".json"), report.dump(1));
  reports_[model_id] = std::move(report);
}

std::optional<json> SessionStore::report(const std::string& model_id) const {
  std::shared_lock lock(mutex_);
  const auto it = reports_.find(model_id);
  if (it == reports_.end()) return std::nullopt;
  return it->second;
}

std::vector<std::string> SessionStore::log_ids() const {
  std::shared_lock lock(mutex_);
  std::vector<std::string> ids;
  for (const auto& [id, _] : logs_) ids.push_back(id);
  return ids;
}

std::vector<std::string> SessionStore::model_ids() const {
  std::shared_lock lock(mutex_);
  std::vector<std::string> ids;
  for (const auto& [id, _] : models_) ids.push_back(id);
  return ids;
}

// ---------------------------------------------------------------------------
// HTTP

namespace {

struct HttpError {
  int status;
  std::string code;
  std::string message;
};

int status_for(const Error& e) {
  const auto& c = e.code();
  if (c == "CorruptCheckpoint" || c == "VersionMismatch") return 500;
  return 422;
}

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& code, const std::string& message) {
  send_json(res, status, json{{"error", {{"code", code}, {"message", message}}}});
}

json parse_body(const httplib::Request& req) {
  try {
    const auto j = json::parse(req.body);
    if (!j.is_object()) throw HttpError{400, "InvalidJson", "request body must be a JSON object"};
    return j;
  } catch (const json::parse_error& e) {
    throw HttpError{400, "InvalidJson", e.what()};
  }
}

std::string require_string(const json& j, const char* key) {
  if (!j.contains(key) || !j.at(key).is_string()) {
    throw InvalidArgument(std::string("missing string field '") + key + "'");
  }
  return j.at(key).get<std::string>();
}

}  // namespace

struct Server::Impl {
  httplib::Server http;
  std::counting_semaphore<1024> slots;

  explicit Impl(unsigned workers) : slots(static_cast<std::ptrdiff_t>(std::clamp(workers, 1u, 1024u))) {}
};

Server::Server(ServiceConfig config)
    : config_(std::move(config)), store_(config_.data_dir), impl_(std::make_unique<Impl>(config_.explain_workers)) {
  auto& http = impl_->http;

  // Every handler goes through `guard`, which maps exceptions to JSON errors.
  auto guard = [](auto fn) {
    return [fn](const httplib::Request& req, httplib::Response& res) {
      try {
        fn(req, res);
      } catch (const HttpError& e) {
        send_error(res, e.status, e.code, e.message);
      } catch (const Error& e) {
        send_error(res, status_for(e), e.code(), e.what());
      } catch (const std::exception& e) {
        send_error(res, 500, "Internal", e.what());
      }
    };
  };
  auto snapshot_of = [this](const std::string& id) {
    auto m = store_.model(id);
    if (m) return m;
    if (store_.model_pending(id)) throw HttpError{409, "ModelNotReady", "model " + id + " is still training"};
    throw HttpError{404, "NotFound", "unknown model " + id};
  };

  http.set_default_headers({{"Access-Control-Allow-Origin", config_.cors_origin},
                            {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                            {"Access-Control-Allow-Headers", "Content-Type"}});
  http.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

  http.Get("/health", guard([](const httplib::Request&, httplib::Response& res) {
             send_json(res, 200, json{{"status", "ok"}});
           }));

  http.Post("/logs", guard([this](const httplib::Request& req, httplib::Response& res) {
              EventLog log;
              if (req.is_multipart_form_data()) {
                if (!req.has_file("file")) throw InvalidArgument("multipart upload needs a 'file' part");
                log = parse_csv_text(req.get_file_value("file").content);
              } else {
                const auto body = parse_body(req);
                if (body.contains("synth")) {
                  log = synth::generate(synth::SynthConfig::from_json(body.at("synth")));
                } else if (body.contains("csv") && body.at("csv").is_string()) {
                  log = parse_csv_text(body.at("csv").get<std::string>());
                } else {
                  throw InvalidArgument("body needs 'synth' (generator config) or 'csv' (text)");
                }
              }
              const std::size_t n = log.cases.size();
              const json sizes{{"activities", log.vocab.activities.size()}, {"resources", log.vocab.resources.size()}};
              const auto id = store_.add_log(std::move(log));
              send_json(res, 201, json{{"log_id", id}, {"n_cases", n}, {"vocab_sizes", sizes}});
            }));

  http.Get("/logs", guard([this](const httplib::Request&, httplib::Response& res) {
             send_json(res, 200, json{{"logs", store_.log_ids()}});
           }));

  http.Post("/models", guard([this](const httplib::Request& req, httplib::Response& res) {
              const auto body = parse_body(req);
              const auto log_id = require_string(body, "log_id");
              if (!store_.log(log_id)) throw HttpError{404, "NotFound", "unknown log " + log_id};
              const auto cfg = ModelConfig::from_json(body.value("config", json::object()));
              cfg.validate();
              const auto job = store_.create_job(log_id);
              {
                std::lock_guard lock(queue_mutex_);
                queue_.emplace_back(job.id, cfg);
              }
              queue_cv_.notify_one();
              send_json(res, 202, json{{"model_id", job.model_id}, {"job_id", job.id}});
            }));

  http.Get("/models", guard([this](const httplib::Request&, httplib::Response& res) {
             send_json(res, 200, json{{"models", store_.model_ids()}});
           }));

  http.Get(R"(/models/([^/]+))", guard([snapshot_of](const httplib::Request& req, httplib::Response& res) {
             const auto m = snapshot_of(req.matches[1]);
             send_json(res, 200,
                       json{{"model_id", m->id},
                            {"log_id", m->log_id},
                            {"config", m->model.config().to_json()},
                            {"vocabulary", to_json(m->model.vocab())},
                            {"amount_stats", {{"mean", m->model.amount_stats().mean},
                                              {"std", m->model.amount_stats().std}}}});
           }));

  http.Get(R"(/jobs/([^/]+))", guard([this](const httplib::Request& req, httplib::Response& res) {
             const auto job = store_.job(req.matches[1]);
             if (!job) throw HttpError{404, "NotFound", "unknown job " + std::string(req.matches[1])};
             send_json(res, 200, job->to_json());
           }));

  http.Post("/predict", guard([snapshot_of](const httplib::Request& req, httplib::Response& res) {
              const auto body = parse_body(req);
              const auto m = snapshot_of(require_string(body, "model_id"));
              if (!body.contains("prefix")) throw InvalidArgument("missing field 'prefix'");
              const auto prefix = parse_prefix(body.at("prefix"));
              if (!body.contains("amount") || !body.at("amount").is_number()) {
                throw InvalidArgument("missing numeric field 'amount'");
              }
              const double amount = body.at("amount").get<double>();
              if (amount < 0) throw NegativeAmount("amount must be non-negative");
              const int top_k = body.value("top_k", 5);
              if (top_k < 1) throw InvalidArgument("top_k must be at least 1");
              const auto p = m->model.predict_next(prefix, amount, UnkPolicy::kThrow);
              const auto& acts = m->model.vocab().activities;
              std::vector<int> order;
              for (int i = 0; i < acts.size(); ++i) {
                if (acts.is_data(i) || i == TokenMap::kEos) order.push_back(i);
              }
              std::stable_sort(order.begin(), order.end(),
                               [&](int a, int b) { return p.probabilities[a] > p.probabilities[b]; });
              json dist = json::array();
              for (int i = 0; i < top_k && i < static_cast<int>(order.size()); ++i) {
                dist.push_back({{"activity", acts.token_of(order[i])}, {"probability", p.probabilities[order[i]]}});
              }
              send_json(res, 200,
                        json{{"model_id", m->id},
                             {"next_activity", p.activity},
                             {"probability", p.probabilities[p.index]},
                             {"top_k", dist}});
            }));

  http.Post("/explain", guard([this, snapshot_of](const httplib::Request& req, httplib::Response& res) {
              const auto body = parse_body(req);
              const auto m = snapshot_of(require_string(body, "model_id"));
              const auto q = CounterfactualQuery::from_json(body.contains("query") ? body.at("query") : body);
              const auto weights = LossWeights::from_json(body.value("weights", json::object()));
              auto budget = Budget::from_json(body.value("budget", json::object()));
              auto timeout = config_.explain_timeout;
              if (body.contains("timeout_ms")) timeout = std::chrono::milliseconds(body.at("timeout_ms").get<long>());
              const auto deadline = Clock::now() + timeout;
              budget.deadline = deadline;
              const auto encoded = encode_query(q, m->model);

              if (!impl_->slots.try_acquire_until(deadline)) {
                send_json(res, 504,
                          json{{"model_id", m->id}, {"query", q.to_json()}, {"results", json::array()},
                               {"truncated", true}, {"baseline_outcome", nullptr}});
                return;
              }
              struct Release {
                std::counting_semaphore<1024>& s;
                ~Release() { s.release(); }
              } release{impl_->slots};

              const auto e = explain(encoded, m->model, m->bank, weights, budget);
              json results = json::array();
              for (const auto& r : e.results) results.push_back(r.to_json());
              json baseline = nullptr;
              if (!e.truncated && body.value("baseline", true)) {
                baseline = json::object();
                for (auto d : {BaselineDimension::kActivity, BaselineDimension::kResource}) {
                  BaselineOptions bo;
                  bo.dimension = d;
                  bo.k = encoded.k;
                  bo.lambda1 = weights.lambda1;
                  bo.lambda2 = weights.lambda2;
                  baseline[to_string(d)] = to_string(dice_baseline(encoded, m->model, m->bank, bo).outcome);
                }
              }
              send_json(res, e.truncated ? 504 : 200,
                        json{{"model_id", m->id},
                             {"query", q.to_json()},
                             {"results", results},
                             {"truncated", e.truncated},
                             {"seeds_checked", e.seeds_checked},
                             {"seeds_optimized", e.seeds_optimized},
                             {"baseline_outcome", baseline}});
            }));

  http.Get(R"(/milestones/([^/]+))", guard([this, snapshot_of](const httplib::Request& req, httplib::Response& res) {
             const auto m = snapshot_of(req.matches[1]);
             json ms = json::array();
             for (const auto& name : config_.milestones) {
               if (m->model.vocab().activities.find(name)) ms.push_back(name);
             }
             send_json(res, 200, json{{"model_id", m->id}, {"milestones", ms}});
           }));

  http.Get(R"(/report/([^/]+))", guard([this, snapshot_of](const httplib::Request& req, httplib::Response& res) {
             const auto m = snapshot_of(req.matches[1]);
             const auto r = store_.report(m->id);
             if (!r) throw HttpError{404, "NotFound", "no report for model " + m->id};
             send_json(res, 200, *r);
           }));

  http.Post(R"(/report/([^/]+))", guard([this, snapshot_of](const httplib::Request& req, httplib::Response& res) {
              const auto m = snapshot_of(req.matches[1]);
              const auto body = parse_body(req);
              auto suite = eval::SuiteConfig::from_json(body.value("suite", json::object()));
              if (!body.contains("suite") || !body.at("suite").contains("milestones")) {
                suite.milestones = config_.milestones;
              }
              eval::SuiteOptions opts;
              opts.weights = LossWeights::from_json(body.value("weights", json::object()));
              opts.budget = Budget::from_json(body.value("budget", json::object()));
              impl_->slots.acquire();
              struct Release {
                std::counting_semaphore<1024>& s;
                ~Release() { s.release(); }
              } release{impl_->slots};
              const auto report = eval::run_milestone_suite(m->model, m->bank, suite, opts);
              auto j = report.to_json(m->model.vocab());
              j["model_id"] = m->id;
              j["text"] = report.to_text();
              store_.put_report(m->id, j);
              send_json(res, 200, j);
            }));

  trainer_ = std::thread([this] { train_loop(); });
}

Server::~Server() {
  stop();
  {
    std::lock_guard lock(queue_mutex_);
    stopping_ = true;
  }
  queue_cv_.notify_all();
  if (trainer_.joinable()) trainer_.join();
}

void Server::train_loop() {
  for (;;) {
    std::pair<std::string, ModelConfig> item;
    {
      std::unique_lock lock(queue_mutex_);
      queue_cv_.wait(lock, [this] { return stopping_ || !queue_.empty(); });
      if (stopping_) return;
      item = std::move(queue_.front());
      queue_.pop_front();
    }
    auto status = *store_.job(item.first);
    status.state = JobStatus::State::kRunning;
    store_.update_job(status);
    try {
      const auto log = store_.log(status.log_id);
      auto outcome = train(*log, item.second, [&](int epoch, double loss) {
        status.epochs_done = epoch + 1;
        status.epoch_losses.push_back(loss);
        store_.update_job(status);
      });
      store_.add_model(status.model_id, status.log_id, std::move(outcome.model));
      status.report = outcome.report;
      status.state = JobStatus::State::kDone;
    } catch (const Error& e) {
      status.state = JobStatus::State::kFailed;
      status.error_code = e.code();
      status.error_message = e.what();
    } catch (const std::exception& e) {
      status.state = JobStatus::State::kFailed;
      status.error_code = "Internal";
      status.error_message = e.what();
    }
    store_.update_job(status);
  }
}

int Server::start() {
  auto& http = impl_->http;
  int port = config_.port;
  if (port == 0) {
    port = http.bind_to_any_port(config_.host);
  } else if (!http.bind_to_port(config_.host, port)) {
    port = -1;
  }
  if (port < 0) throw InvalidArgument("cannot bind " + config_.host + ":" + std::to_string(config_.port));
  listener_ = std::thread([&http] { http.listen_after_bind(); });
  http.wait_until_ready();
  return port;
}

void Server::run() {
  if (!impl_->http.listen(config_.host, config_.port)) {
    throw InvalidArgument("cannot listen on " + config_.host + ":" + std::to_string(config_.port));
  }
}

void Server::stop() {
  impl_->http.stop();
  if (listener_.joinable()) listener_.join();
}

}  // namespace milecf::service
