#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "milecf/evaluation.hpp"
#include "milecf/service.hpp"
#include "milecf/synthgen.hpp"

using namespace milecf;
namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kDefaultSeed = 42;

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw InvalidArgument(path.string() + ": " + e.what());
  }
}

// Inline JSON text, or the path of a JSON file.
json json_argument(const std::string& text) {
  if (fs::is_regular_file(text)) return read_json_file(text);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw InvalidArgument("not a JSON value or file: " + text);
  }
}

void write_text(const std::optional<fs::path>& out, const std::string& text) {
  if (!out) {
    std::cout << text;
    return;
  }
  std::ofstream f(*out, std::ios::binary);
  if (!f) throw InvalidArgument("cannot write " + out->string());
  f << text;
}

EventLog load_log(const fs::path& path) { return event_log_from_json(read_json_file(path)); }

// The bank is the training part of the log, split the way the trainer split it.
KnowledgeBank training_bank(const fs::path& log_path, const NextActivityModel& model) {
  const auto& cfg = model.config();
  const auto split = split_train_test(load_log(log_path), cfg.test_fraction, cfg.seed);
  return KnowledgeBank(split.first.cases, model.vocab());
}

int report_error(const std::string& code, const std::string& message) {
  std::cerr << json{{"error", {{"code", code}, {"message", message}}}}.dump() << "\n";
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"milecf: next-activity prediction and milestone counterfactuals for event logs"};
  app.require_subcommand(1);
  std::optional<std::uint64_t> seed;
  app.add_option("--seed", seed, "Seed for every random choice (default 42)");

  // ingest
  auto* ingest = app.add_subcommand("ingest", "Parse a CSV event log into log JSON");
  std::string ingest_csv, ingest_schema;
  fs::path ingest_out;
  ingest->add_option("csv", ingest_csv, "CSV file")->required()->check(CLI::ExistingFile);
  ingest->add_option("--out", ingest_out, "Output log JSON")->required();
  ingest->add_option("--schema", ingest_schema, "Column names as JSON: {case_id, activity, resource, amount, timestamp}");

  // synth
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic loan-process log");
  std::string synth_config;
  fs::path synth_out;
  synth_cmd->add_option("--config", synth_config, "Generator config (JSON text or file)");
  synth_cmd->add_option("--out", synth_out, "Output log JSON")->required();
  bool synth_csv = false;
  synth_cmd->add_flag("--csv", synth_csv, "Write CSV instead of log JSON");

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a next-activity model");
  fs::path train_log, train_out;
  std::string train_config;
  train_cmd->add_option("log", train_log, "Log JSON")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--config", train_config, "Model config (JSON text or file)");
  train_cmd->add_option("--out", train_out, "Output checkpoint")->required();
  bool train_quiet = false;
  train_cmd->add_flag("--quiet", train_quiet, "No per-epoch progress on stderr");

  // predict
  auto* predict_cmd = app.add_subcommand("predict", "Predict the next activity of a running case");
  fs::path predict_model;
  std::string predict_prefix;
  std::optional<double> predict_amount;
  int predict_top = 5;
  predict_cmd->add_option("model", predict_model, "Checkpoint")->required()->check(CLI::ExistingFile);
  predict_cmd->add_option("--prefix", predict_prefix,
                          "Prefix as [[activity, resource], ...] or {prefix, amount} (JSON text or file)")
      ->required();
  predict_cmd->add_option("--amount", predict_amount, "Requested amount");
  predict_cmd->add_option("--top", predict_top, "Distribution entries to print")->check(CLI::PositiveNumber);

  // explain
  auto* explain_cmd = app.add_subcommand("explain", "Counterfactuals that reach a milestone");
  fs::path explain_model, explain_log;
  std::string explain_query, explain_weights, explain_budget, explain_format = "table";
  bool explain_mutable = false;
  std::optional<int> explain_k;
  explain_cmd->add_option("model", explain_model, "Checkpoint")->required()->check(CLI::ExistingFile);
  explain_cmd->add_option("--log", explain_log, "Log JSON the model was trained on")
      ->required()
      ->check(CLI::ExistingFile);
  explain_cmd->add_option("--query", explain_query, "Query {prefix, amount, milestone} (JSON text or file)")
      ->required();
  explain_cmd->add_flag("--amount-mutable", explain_mutable, "Let the search change the amount");
  explain_cmd->add_option("--k", explain_k, "Number of counterfactuals")->check(CLI::PositiveNumber);
  explain_cmd->add_option("--weights", explain_weights, "Loss weights (JSON text or file)");
  explain_cmd->add_option("--budget", explain_budget, "Search budget (JSON text or file)");
  explain_cmd->add_option("--format", explain_format, "table or json")->check(CLI::IsMember({"table", "json"}));

  // evaluate
  auto* eval_cmd = app.add_subcommand("evaluate", "Run a milestone query suite");
  fs::path eval_model, eval_log, eval_suite;
  std::optional<fs::path> eval_out;
  std::string eval_format = "text", eval_budget;
  unsigned eval_threads = 1;
  eval_cmd->add_option("model", eval_model, "Checkpoint")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--log", eval_log, "Log JSON the model was trained on")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--suite", eval_suite, "Suite {milestones, queries}")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--out", eval_out, "Report file (stdout when absent)");
  eval_cmd->add_option("--format", eval_format, "text or json")->check(CLI::IsMember({"text", "json"}));
  eval_cmd->add_option("--budget", eval_budget, "Search budget (JSON text or file)");
  eval_cmd->add_option("--threads", eval_threads, "Concurrent queries")->check(CLI::PositiveNumber);

  // queries
  auto* queries_cmd = app.add_subcommand("queries", "Build a query suite from held-out cases of a log");
  fs::path queries_log;
  std::optional<fs::path> queries_out;
  std::vector<std::string> queries_milestones{synth::kAccepted, synth::kFinalised, synth::kApproved};
  std::size_t queries_per = 10;
  double queries_fraction = 0.2;
  queries_cmd->add_option("log", queries_log, "Log JSON")->required()->check(CLI::ExistingFile);
  queries_cmd->add_option("--milestones", queries_milestones, "Milestone activities");
  queries_cmd->add_option("--per-milestone", queries_per, "Queries per milestone");
  queries_cmd->add_option("--test-fraction", queries_fraction, "Held-out fraction, as in training");
  queries_cmd->add_option("--out", queries_out, "Suite file (stdout when absent)");

  // serve
  auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP service");
  service::ServiceConfig serve_cfg;
  long serve_timeout_ms = serve_cfg.explain_timeout.count();
  serve_cmd->add_option("--data-dir", serve_cfg.data_dir, "Persistence directory")->required();
  serve_cmd->add_option("--port", serve_cfg.port, "Port");
  serve_cmd->add_option("--host", serve_cfg.host, "Bind address");
  serve_cmd->add_option("--workers", serve_cfg.explain_workers, "Concurrent explain requests");
  serve_cmd->add_option("--timeout-ms", serve_timeout_ms, "Default explain timeout");
  serve_cmd->add_option("--cors-origin", serve_cfg.cors_origin, "Allowed browser origin");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << json{{"error", {{"code", "Usage"}, {"message", e.what()}}}}.dump() << "\n";
    return 2;
  }

  try {
    if (*ingest) {
      CsvSchema schema;
      if (!ingest_schema.empty()) schema = CsvSchema::from_json(json_argument(ingest_schema));
      const auto log = parse_csv(ingest_csv, schema);
      write_text(ingest_out, to_json(log).dump(1) + "\n");
      std::cout << json{{"n_cases", log.cases.size()},
                        {"n_events", log.event_count()},
                        {"activities", log.vocab.activities.size()},
                        {"resources", log.vocab.resources.size()}}
                       .dump()
                << "\n";
    } else if (*synth_cmd) {
      json j = synth_config.empty() ? json::object() : json_argument(synth_config);
      if (seed || !j.contains("seed")) j["seed"] = seed.value_or(kDefaultSeed);
      const auto log = synth::generate(synth::SynthConfig::from_json(j));
      write_text(synth_out, synth_csv ? to_csv(log) : to_json(log).dump(1) + "\n");
      std::cout << json{{"n_cases", log.cases.size()}, {"n_events", log.event_count()}}.dump() << "\n";
    } else if (*train_cmd) {
      json j = train_config.empty() ? json::object() : json_argument(train_config);
      if (seed || !j.contains("seed")) j["seed"] = seed.value_or(kDefaultSeed);
      const auto cfg = ModelConfig::from_json(j);
      cfg.validate();
      auto outcome = train(load_log(train_log), cfg, [&](int epoch, double loss) {
        if (!train_quiet) std::cerr << "epoch " << epoch + 1 << "/" << cfg.epochs << " loss " << loss << "\n";
      });
      outcome.model.save(train_out);
      std::cout << json{{"checkpoint", train_out.string()},
                        {"parameters", outcome.model.parameter_count()},
                        {"epoch_losses", outcome.epoch_losses},
                        {"held_out", outcome.report.to_json()}}
                       .dump(1)
                << "\n";
    } else if (*predict_cmd) {
      const auto model = NextActivityModel::load(predict_model);
      const json arg = json_argument(predict_prefix);
      const json rows = arg.is_object() ? arg.at("prefix") : arg;
      double amount = predict_amount.value_or(arg.is_object() ? arg.value("amount", -1.0) : -1.0);
      if (amount < 0) throw InvalidArgument("an amount is required (--amount or \"amount\" in the prefix object)");
      const auto p = model.predict_next(parse_prefix(rows), amount, UnkPolicy::kThrow);
      const auto& acts = model.vocab().activities;
      std::vector<int> order;
      for (int i = 0; i < acts.size(); ++i) {
        if (acts.is_data(i) || i == TokenMap::kEos) order.push_back(i);
      }
      std::stable_sort(order.begin(), order.end(),
                       [&](int a, int b) { return p.probabilities[a] > p.probabilities[b]; });
      json dist = json::array();
      for (int i = 0; i < predict_top && i < static_cast<int>(order.size()); ++i) {
        dist.push_back({{"activity", acts.token_of(order[i])}, {"probability", p.probabilities[order[i]]}});
      }
      std::cout << json{{"next_activity", p.activity}, {"probability", p.probabilities[p.index]}, {"top_k", dist}}.dump(1)
                << "\n";
    } else if (*explain_cmd) {
      const auto model = NextActivityModel::load(explain_model);
      const auto bank = training_bank(explain_log, model);
      auto q = CounterfactualQuery::from_json(json_argument(explain_query));
      if (explain_mutable) q.amount_mutable = true;
      if (explain_k) q.k = *explain_k;
      const auto weights = LossWeights::from_json(explain_weights.empty() ? json::object() : json_argument(explain_weights));
      const auto budget = Budget::from_json(explain_budget.empty() ? json::object() : json_argument(explain_budget));
      const auto encoded = encode_query(q, model);
      const auto e = explain(encoded, model, bank, weights, budget);
      if (explain_format == "json") {
        json rs = json::array();
        for (const auto& r : e.results) rs.push_back(r.to_json());
        std::cout << json{{"query", q.to_json()}, {"results", rs}, {"truncated", e.truncated}}.dump(1) << "\n";
      } else {
        const auto p = model.predict(encoded.activities, encoded.resources, encoded.amount);
        std::cout << "Prediction: " << p.activity << "\nMilestone: " << q.desired_activity << "\n";
        if (e.results.empty()) {
          std::cout << "No counterfactual found\n";
        } else {
          std::cout << eval::render_counterfactuals(e.results);
        }
      }
      if (e.results.empty()) return report_error("NoCounterfactualFound", "no counterfactual reaches the milestone");
    } else if (*eval_cmd) {
      const auto model = NextActivityModel::load(eval_model);
      const auto bank = training_bank(eval_log, model);
      eval::SuiteOptions opts;
      opts.threads = eval_threads;
      if (!eval_budget.empty()) opts.budget = Budget::from_json(json_argument(eval_budget));
      const auto report = eval::run_milestone_suite(model, bank, eval::SuiteConfig::load(eval_suite), opts);
      write_text(eval_out, eval_format == "json" ? report.to_json(model.vocab()).dump(1) + "\n" : report.to_text());
    } else if (*queries_cmd) {
      const std::uint64_t s = seed.value_or(kDefaultSeed);
      const auto held_out = split_train_test(load_log(queries_log), queries_fraction, s).second;
      eval::SuiteConfig suite;
      suite.milestones = queries_milestones;
      suite.queries = eval::sample_queries(held_out.cases, queries_milestones, queries_per, s);
      write_text(queries_out, suite.to_json().dump(1) + "\n");
    } else if (*serve_cmd) {
      serve_cfg.explain_timeout = std::chrono::milliseconds(serve_timeout_ms);
      service::Server server(serve_cfg);
      std::cerr << "listening on " << serve_cfg.host << ":" << serve_cfg.port << "\n";
      server.run();
    }
  } catch (const Error& e) {
    return report_error(e.code(), e.what());
  } catch (const json::exception& e) {
    return report_error("InvalidArgument", e.what());
  } catch (const std::exception& e) {
    return report_error("Internal", e.what());
  }
  return 0;
}
