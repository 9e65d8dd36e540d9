#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "milecf/cfengine.hpp"

namespace milecf::eval {

using milecf::levenshtein;
using milecf::proximity;

/// Directly-follows graph mined from training cases.
class ProcessGraph {
 public:
  static ProcessGraph mine(const std::vector<Case>& cases);

  /// Every consecutive activity pair is an edge.
  bool conforms(const std::vector<std::string>& activities) const;
  std::size_t frequency(const std::string& from, const std::string& to) const;
  const std::set<std::string>& nodes() const { return nodes_; }
  const std::map<std::pair<std::string, std::string>, std::size_t>& edges() const { return edges_; }

  json to_json() const;

 private:
  std::set<std::string> nodes_;
  std::map<std::pair<std::string, std::string>, std::size_t> edges_;
};

/// Prefix membership in the knowledge bank.
bool plausible(std::span<const int> activities, const KnowledgeBank& bank);

struct Diversity {
  std::size_t distinct = 0;
  std::optional<std::size_t> min_pairwise;  // absent for fewer than two results
};

Diversity diversity(const std::vector<std::vector<std::string>>& traces);

// ---------------------------------------------------------------------------
// Milestone suite

struct SuiteConfig {
  std::vector<std::string> milestones{"A_PREACCEPTED", "A_ACCEPTED", "A_FINALISED", "A_APPROVED"};
  std::vector<CounterfactualQuery> queries;

  json to_json() const;
  static SuiteConfig from_json(const json& j);
  static SuiteConfig load(const std::filesystem::path& path);
};

struct BaselineRun {
  BaselineOutcome outcome = BaselineOutcome::kNotFound;
  int iterations = 0;
  std::vector<BaselineCandidate> found;
};

/// Per-counterfactual metrics for one dimension.
struct CfMetrics {
  double proximity = 0.0;
  std::size_t sparsity = 0;
  bool plausible = false;
  std::vector<std::string> trace;  // activities or resources, milestone included
};

struct QueryOutcome {
  CounterfactualQuery query;
  std::string error;  // stable error code when the query could not run
  std::string error_message;
  std::vector<CounterfactualResult> results;
  bool truncated = false;
  std::map<BaselineDimension, BaselineRun> baseline;
  std::map<BaselineDimension, std::vector<CfMetrics>> baseline_metrics;

  bool failed() const { return !error.empty(); }
  json to_json(const Vocabulary& vocab) const;
};

struct MetricRow {
  std::string generator;  // "DiCE" or "MileCF"
  BaselineDimension dimension = BaselineDimension::kActivity;
  std::size_t queries = 0;
  std::size_t queries_found = 0;
  std::size_t counterfactuals = 0;
  std::optional<double> proximity;  // mean over counterfactuals
  std::optional<double> sparsity;
  std::optional<double> distinct;   // mean distinct count over successful queries
  std::optional<double> plausible;  // fraction of plausible counterfactuals
  bool diverse = false;             // some query produced two distinct counterfactuals
  bool all_plausible = false;
  bool categorical = false;         // found counterfactuals on a categorical dimension

  json to_json() const;
};

struct MetricReport {
  std::vector<std::string> milestones;
  std::vector<MetricRow> rows;
  std::vector<QueryOutcome> queries;
  std::size_t failed_queries = 0;

  json to_json(const Vocabulary& vocab) const;
  /// Comparison table followed by one counterfactual table per query.
  std::string to_text() const;
};

struct SuiteOptions {
  LossWeights weights;
  Budget budget;
  BaselineOptions baseline;
  unsigned threads = 1;
};

/// Runs explain and the baseline (activity and resource dimensions) for every
/// query. Per-query errors are recorded, not thrown.
MetricReport run_milestone_suite(const NextActivityModel& model, const KnowledgeBank& bank,
                                 const SuiteConfig& config, const SuiteOptions& options = {});

/// Rebuilds the comparison rows from per-query outcomes.
std::vector<MetricRow> summarize(const std::vector<QueryOutcome>& outcomes);

/// Side-by-side activity/resource columns, one pair per counterfactual, with
/// an AMOUNT row.
std::string render_counterfactuals(const std::vector<CounterfactualResult>& results);

/// Deterministic queries cut from held-out cases: at least two events, the
/// prefix does not contain the milestone and the recorded next activity is
/// not the milestone. Odd-numbered queries per milestone let the amount vary.
std::vector<CounterfactualQuery> sample_queries(const std::vector<Case>& cases,
                                                const std::vector<std::string>& milestones,
                                                std::size_t per_milestone, std::uint64_t seed, int k = 3);

}  // namespace milecf::eval
