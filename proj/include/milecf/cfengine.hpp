#pragma once

#include <chrono>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "milecf/knowledge.hpp"
#include "milecf/metrics.hpp"
#include "milecf/predictor.hpp"

namespace milecf {

using Clock = std::chrono::steady_clock;

struct CounterfactualQuery {
  std::vector<std::pair<std::string, std::string>> prefix;  // (activity, resource)
  double amount = 0.0;
  std::string desired_activity;
  bool amount_mutable = false;
  int k = 3;

  json to_json() const;
  static CounterfactualQuery from_json(const json& j);
};

/// Rows as [activity, resource] pairs or {activity, resource} objects.
std::vector<std::pair<std::string, std::string>> parse_prefix(const json& rows);

/// A query resolved against a model vocabulary.
struct EncodedQuery {
  std::vector<int> activities;
  std::vector<int> resources;
  double amount = 0.0;
  double amount_norm = 0.0;
  int desired = 0;
  bool amount_mutable = false;
  int k = 3;
};

/// Unknown tokens are rejected (UnknownToken); the desired activity must be a
/// data token; k >= 1; the prefix must be non-empty (InvalidArgument).
EncodedQuery encode_query(const CounterfactualQuery& q, const NextActivityModel& model);

/// Relaxed candidate: rows live on the probability simplex, positions past
/// the last row are implicitly PAD.
struct CandidateTrace {
  Mat activity_probs;  // L x |A|
  Mat resource_probs;  // L x |R|
  double amount_norm = 0.0;

  Eigen::Index length() const { return activity_probs.rows(); }
  static CandidateTrace one_hot(std::span<const int> activities, std::span<const int> resources,
                                double amount_norm, int n_activities, int n_resources);
  /// Row-wise argmax restricted to data tokens; ties go to the lowest index.
  std::pair<std::vector<int>, std::vector<int>> argmax(const Vocabulary& vocab) const;
};

struct LossWeights {
  double w_class = 1.0;
  double w_dist = 0.5;
  double w_cat = 1.0;
  double w_scen = 1.0;
  double lambda1 = 0.5;  // baseline proximity weight
  double lambda2 = 1.0;  // baseline diversity weight

  void validate() const;
  json to_json() const;
  static LossWeights from_json(const json& j);
};

struct Budget {
  int max_iters = 500;
  int check_every = 10;
  double step = 0.05;
  double tau = 0.05;
  double amount_granularity = 250.0;
  Channel channel = Channel::kBoth;
  std::optional<Clock::time_point> deadline;

  void validate() const;
  json to_json() const;
  static Budget from_json(const json& j);
};

struct LossBreakdown {
  double class_loss = 0.0;
  double distance = 0.0;
  double category = 0.0;
  double scenario = 0.0;
  double total = 0.0;

  json to_json() const;
};

struct CounterfactualResult {
  std::vector<Event> trace;  // candidate prefix followed by the milestone event
  double amount = 0.0;
  LossBreakdown losses;
  double proximity = 0.0;  // both channels plus the amount delta
  double proximity_activity = 0.0;
  double proximity_resource = 0.0;
  std::size_t sparsity = 0;  // activity edits
  std::size_t sparsity_resource = 0;
  bool plausible = false;
  int iterations = 0;
  std::string seed_case_id;

  std::vector<std::string> activities() const;
  std::vector<std::string> resources() const;
  json to_json() const;
};

struct NotConverged {
  std::vector<Event> trace;  // discretised best effort, milestone appended
  double amount = 0.0;
  LossBreakdown losses;
  int iterations = 0;
  std::string seed_case_id;
  bool timed_out = false;
};

using OptimizeOutcome = std::variant<CounterfactualResult, NotConverged>;

// ---------------------------------------------------------------------------
// Losses (differentiable in the candidate)

/// Multiclass hinge on the desired class.
Var class_loss(const Var& logits, int desired, Real margin = 1.0);

/// L2 between the PAD-aligned candidate and the query one-hot encoding.
/// `amount` may be null when the amount is not part of the search.
Var distance_loss(const Var& activity_probs, const Var& resource_probs, const Var* amount,
                  const EncodedQuery& query, int n_activities, int n_resources,
                  Channel channel = Channel::kBoth);

/// Sum of squared row-sum deviations from 1 plus squared negative parts.
Var category_loss(const Var& activity_probs, const Var& resource_probs);

/// 1 - S where s_j is the mean over the candidate's rows of the probability
/// it gives to trace j's token at that row, and S is the softmax(s / tau)
/// weighted mean of the s_j (the plain maximum when tau == 0).
Var scenario_loss(const Var& activity_probs, std::span<const std::vector<int>> bank, Real tau);

struct LossTerms {
  Var class_loss;
  Var distance;
  Var category;
  Var scenario;
  Var total;
};

LossTerms total_loss(const Var& activity_probs, const Var& resource_probs, const Var& amount,
                        const EncodedQuery& query, const NextActivityModel& model,
                        std::span<const std::vector<int>> scenario_bank, const LossWeights& weights,
                        Real tau, Channel channel = Channel::kBoth);

// ---------------------------------------------------------------------------
// Search

struct Seed {
  std::size_t trace_index = 0;
  std::string case_id;
  std::size_t milestone_position = 0;  // index of the milestone in the trace
  std::vector<int> activities;         // trace before the milestone
  std::vector<int> resources;
  int milestone_resource = 0;
  double amount = 0.0;
  std::size_t distance = 0;  // activity edit distance to the query prefix

  CandidateTrace candidate(const NextActivityModel& model, const EncodedQuery& query) const;
};

/// Training traces that contain the milestone, cut before its first
/// occurrence, nearest to the query prefix by activity edit distance (ties:
/// shorter trace, then case id). May return fewer than k.
std::vector<Seed> seed_candidates(const EncodedQuery& query, const KnowledgeBank& bank, std::size_t k);

/// Every distinct (trace, milestone occurrence) seed in seeding order.
std::vector<Seed> seed_pool(const EncodedQuery& query, const KnowledgeBank& bank);

/// Called after every update with the projected candidate.
using StepObserver = std::function<void(int iteration, const CandidateTrace&)>;

OptimizeOutcome optimize(const Seed& seed, const EncodedQuery& query, const NextActivityModel& model,
                         const KnowledgeBank& bank, const LossWeights& weights, const Budget& budget,
                         const StepObserver& observer = {});

/// Success test on a concrete candidate: the model predicts the milestone
/// after the prefix and prefix + milestone is a training prefix.
bool is_valid_counterfactual(std::span<const int> activities, std::span<const int> resources,
                             double amount, int desired, const NextActivityModel& model,
                             const KnowledgeBank& bank);

/// Rounds to the nearest multiple of `granularity` (no rounding when <= 0).
double round_amount(double amount, double granularity);

struct Explanation {
  std::vector<CounterfactualResult> results;
  bool truncated = false;  // the deadline cut the search short
  std::size_t seeds_checked = 0;
  std::size_t seeds_optimized = 0;
};

/// Checks every seed as-is, optimises the best-ranked failing seeds, then
/// keeps one result per activity sequence (the closest), ordered by
/// proximity and case id, at most query.k.
Explanation explain(const EncodedQuery& query, const NextActivityModel& model,
                    const KnowledgeBank& bank, const LossWeights& weights, const Budget& budget);

/// explain() that throws NoCounterfactualFound when nothing was found.
std::vector<CounterfactualResult> generate(const EncodedQuery& query, const NextActivityModel& model,
                                           const KnowledgeBank& bank, const LossWeights& weights,
                                           const Budget& budget);

// ---------------------------------------------------------------------------
// Gradient baseline with hard categorical projection

enum class BaselineOutcome { kFound, kNotFound, kLoopDetected };
enum class BaselineDimension { kActivity, kResource, kAmount };

const char* to_string(BaselineOutcome o);
const char* to_string(BaselineDimension d);

struct BaselineOptions {
  double lambda1 = 0.5;
  double lambda2 = 1.0;
  int k = 3;
  int max_iters = 500;
  double step = 0.05;
  int loop_window = 50;  // unchanged projected steps that count as a loop
  BaselineDimension dimension = BaselineDimension::kActivity;
};

struct BaselineCandidate {
  std::vector<int> activities;
  std::vector<int> resources;
  double amount = 0.0;
};

struct BaselineResult {
  BaselineOutcome outcome = BaselineOutcome::kNotFound;
  std::vector<BaselineCandidate> found;
  int iterations = 0;
  bool projection_changed = false;  // the projected state ever left the query
};

/// Pairwise kernel K_ij = 1 / (1 + d_ij) over L1 distances scaled by
/// `inv_mad`; each candidate is a 1 x n row.
Var dpp_kernel(const std::vector<Var>& candidates, const Mat& inv_mad);

/// Median absolute deviation with 0 replaced by 1.
double mad_or_one(std::vector<double> values);

BaselineResult dice_baseline(const EncodedQuery& query, const NextActivityModel& model,
                             const KnowledgeBank& bank, const BaselineOptions& options);

}  // namespace milecf
