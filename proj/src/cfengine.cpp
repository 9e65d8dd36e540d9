#include "milecf/cfengine.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <tuple>

namespace milecf {

using num::add;
using num::scale;
using num::square;
using num::sub;
using num::sum;

// ---------------------------------------------------------------------------
// Queries and configuration

json CounterfactualQuery::to_json() const {
  json rows = json::array();
  for (const auto& [a, r] : prefix) rows.push_back(json::array({a, r}));
  return json{{"prefix", std::move(rows)},
              {"amount", amount},
              {"milestone", desired_activity},
              {"amount_mutable", amount_mutable},
              {"k", k}};
}

std::vector<std::pair<std::string, std::string>> parse_prefix(const json& rows) {
  if (!rows.is_array()) throw InvalidArgument("prefix must be an array");
  std::vector<std::pair<std::string, std::string>> out;
  try {
    for (const auto& row : rows) {
      if (row.is_array() && row.size() == 2) {
        out.emplace_back(row[0].get<std::string>(), row[1].get<std::string>());
      } else if (row.is_object()) {
        out.emplace_back(row.at("activity").get<std::string>(), row.at("resource").get<std::string>());
      } else {
        throw InvalidArgument("prefix rows must be [activity, resource] pairs");
      }
    }
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("prefix: ") + e.what());
  }
  return out;
}

CounterfactualQuery CounterfactualQuery::from_json(const json& j) {
  CounterfactualQuery q;
  if (!j.is_object()) throw InvalidArgument("query must be an object");
  try {
    q.prefix = parse_prefix(j.at("prefix"));
    q.amount = j.at("amount").get<double>();
    if (j.contains("milestone")) {
      q.desired_activity = j.at("milestone").get<std::string>();
    } else {
      q.desired_activity = j.at("desired_activity").get<std::string>();
    }
    q.amount_mutable = j.value("amount_mutable", false);
    q.k = j.value("k", 3);
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("query: ") + e.what());
  }
  return q;
}

EncodedQuery encode_query(const CounterfactualQuery& q, const NextActivityModel& model) {
  if (q.prefix.empty()) throw InvalidArgument("query prefix must not be empty");
  if (q.k < 1) throw InvalidArgument("k must be at least 1");
  if (!(q.amount >= 0.0) || !std::isfinite(q.amount)) throw NegativeAmount("query amount must be a non-negative number");
  const auto& vocab = model.vocab();
  EncodedQuery e;
  for (const auto& [a, r] : q.prefix) {
    e.activities.push_back(vocab.activities.encode(a, UnkPolicy::kThrow));
    e.resources.push_back(vocab.resources.encode(r, UnkPolicy::kThrow));
  }
  const auto desired = vocab.activities.find(q.desired_activity);
  if (!desired) throw UnknownToken("unknown milestone '" + q.desired_activity + "'");
  if (!vocab.activities.is_data(*desired)) {
    throw InvalidArgument("milestone '" + q.desired_activity + "' is not an activity");
  }
  e.desired = *desired;
  e.amount = q.amount;
  e.amount_norm = model.amount_stats().normalize(q.amount);
  e.amount_mutable = q.amount_mutable;
  e.k = q.k;
  return e;
}

CandidateTrace CandidateTrace::one_hot(std::span<const int> activities, std::span<const int> resources,
                                       double amount_norm, int n_activities, int n_resources) {
  if (activities.size() != resources.size()) throw ShapeMismatch("activity and resource lengths differ");
  CandidateTrace c;
  const auto len = static_cast<Eigen::Index>(activities.size());
  c.activity_probs = Mat::Zero(len, n_activities);
  c.resource_probs = Mat::Zero(len, n_resources);
  for (Eigen::Index t = 0; t < len; ++t) {
    if (activities[t] < 0 || activities[t] >= n_activities || resources[t] < 0 || resources[t] >= n_resources) {
      throw IndexOutOfBounds("candidate token outside the vocabulary");
    }
    c.activity_probs(t, activities[t]) = 1.0;
    c.resource_probs(t, resources[t]) = 1.0;
  }
  c.amount_norm = amount_norm;
  return c;
}

namespace {

std::vector<int> row_argmax(const Mat& m, const TokenMap& map) {
  std::vector<int> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index t = 0; t < m.rows(); ++t) {
    int best = -1;
    for (int j = TokenMap::kEos + 1; j < map.unk(); ++j) {
      if (best < 0 || m(t, j) > m(t, best)) best = j;
    }
    out[t] = best < 0 ? map.unk() : best;
  }
  return out;
}

}  // namespace

std::pair<std::vector<int>, std::vector<int>> CandidateTrace::argmax(const Vocabulary& vocab) const {
  return {row_argmax(activity_probs, vocab.activities), row_argmax(resource_probs, vocab.resources)};
}

void LossWeights::validate() const {
  for (double w : {w_class, w_dist, w_cat, w_scen, lambda1, lambda2}) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw InvalidArgument("loss weights must be non-negative");
  }
}

json LossWeights::to_json() const {
  return json{{"w_class", w_class}, {"w_dist", w_dist}, {"w_cat", w_cat},
              {"w_scen", w_scen},   {"lambda1", lambda1}, {"lambda2", lambda2}};
}

LossWeights LossWeights::from_json(const json& j) {
  LossWeights w;
  try {
    w.w_class = j.value("w_class", w.w_class);
    w.w_dist = j.value("w_dist", w.w_dist);
    w.w_cat = j.value("w_cat", w.w_cat);
    w.w_scen = j.value("w_scen", w.w_scen);
    w.lambda1 = j.value("lambda1", w.lambda1);
    w.lambda2 = j.value("lambda2", w.lambda2);
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("weights: ") + e.what());
  }
  w.validate();
  return w;
}

void Budget::validate() const {
  if (max_iters < 1) throw InvalidArgument("max_iters must be at least 1");
  if (check_every < 1) throw InvalidArgument("check_every must be at least 1");
  if (!(step > 0.0)) throw InvalidArgument("step must be positive");
  if (!(tau >= 0.0)) throw InvalidArgument("tau must be non-negative");
  if (!(amount_granularity >= 0.0)) throw InvalidArgument("amount_granularity must be non-negative");
}

json Budget::to_json() const {
  return json{{"max_iters", max_iters},
              {"check_every", check_every},
              {"step", step},
              {"tau", tau},
              {"amount_granularity", amount_granularity},
              {"channel", to_string(channel)}};
}

Budget Budget::from_json(const json& j) {
  Budget b;
  try {
    b.max_iters = j.value("max_iters", b.max_iters);
    b.check_every = j.value("check_every", b.check_every);
    b.step = j.value("step", b.step);
    b.tau = j.value("tau", b.tau);
    b.amount_granularity = j.value("amount_granularity", b.amount_granularity);
    if (j.contains("channel")) b.channel = channel_from_string(j.at("channel").get<std::string>());
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("budget: ") + e.what());
  }
  b.validate();
  return b;
}

json LossBreakdown::to_json() const {
  return json{{"class", class_loss}, {"distance", distance}, {"category", category},
              {"scenario", scenario}, {"total", total}};
}

std::vector<std::string> CounterfactualResult::activities() const {
  std::vector<std::string> out;
  for (const auto& e : trace) out.push_back(e.activity);
  return out;
}

std::vector<std::string> CounterfactualResult::resources() const {
  std::vector<std::string> out;
  for (const auto& e : trace) out.push_back(e.resource);
  return out;
}

json CounterfactualResult::to_json() const {
  json rows = json::array();
  for (const auto& e : trace) rows.push_back(json{{"activity", e.activity}, {"resource", e.resource}});
  return json{{"trace", std::move(rows)},
              {"amount", amount},
              {"losses", losses.to_json()},
              {"proximity", proximity},
              {"proximity_activity", proximity_activity},
              {"proximity_resource", proximity_resource},
              {"sparsity", sparsity},
              {"sparsity_resource", sparsity_resource},
              {"plausible", plausible},
              {"iterations", iterations},
              {"seed_case_id", seed_case_id}};
}

// ---------------------------------------------------------------------------
// Losses

Var class_loss(const Var& logits, int desired, Real margin) { return num::hinge(logits, desired, margin); }

namespace {

Mat one_hot_rows(std::span<const int> tokens, Eigen::Index rows, int cols) {
  Mat m = Mat::Zero(rows, cols);
  for (Eigen::Index t = 0; t < rows; ++t) {
    const int tok = t < static_cast<Eigen::Index>(tokens.size()) ? tokens[t] : TokenMap::kPad;
    m(t, tok) = 1.0;
  }
  return m;
}

// Squared L2 between a relaxed block and the PAD-aligned query block.
Var aligned_sq(const Var& probs, std::span<const int> query, int cols) {
  auto& g = probs.graph();
  const Eigen::Index len = probs.rows();
  const Eigen::Index n = std::max<Eigen::Index>(len, static_cast<Eigen::Index>(query.size()));
  Var p = probs;
  if (n > len) {
    Mat pad = Mat::Zero(n - len, cols);
    pad.col(TokenMap::kPad).setOnes();
    p = num::concat_rows(probs, g.constant(std::move(pad)));
  }
  return sum(square(sub(p, g.constant(one_hot_rows(query, n, cols)))));
}

}  // namespace

Var distance_loss(const Var& activity_probs, const Var& resource_probs, const Var* amount,
                  const EncodedQuery& query, int n_activities, int n_resources, Channel channel) {
  auto& g = activity_probs.graph();
  Var total = g.constant(Mat::Zero(1, 1));
  if (channel != Channel::kResource) total = add(total, aligned_sq(activity_probs, query.activities, n_activities));
  if (channel != Channel::kActivity) total = add(total, aligned_sq(resource_probs, query.resources, n_resources));
  if (amount) {
    Mat q(1, 1);
    q(0, 0) = query.amount_norm;
    total = add(total, square(sub(*amount, g.constant(std::move(q)))));
  }
  return num::sqrt(total);
}

Var category_loss(const Var& activity_probs, const Var& resource_probs) {
  auto block = [](const Var& m) {
    const Var rows = num::add_scalar(num::row_sum(m), Real(-1));
    const Var negative = scale(sub(m, num::abs(m)), Real(0.5));
    return add(sum(square(rows)), sum(square(negative)));
  };
  return add(block(activity_probs), block(resource_probs));
}

Var scenario_loss(const Var& activity_probs, std::span<const std::vector<int>> bank, Real tau) {
  if (bank.empty()) throw EmptyKnowledgeBase("scenario bank is empty");
  if (!(tau >= 0)) throw InvalidArgument("tau must be non-negative");
  const Mat& p = activity_probs.value();
  const Eigen::Index len = p.rows(), cols = p.cols();
  if (len < 1) throw ShapeMismatch("scenario loss needs at least one row");
  const std::size_t n = bank.size();
  std::vector<Real> s(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    const auto& trace = bank[j];
    for (Eigen::Index t = 0; t < len && t < static_cast<Eigen::Index>(trace.size()); ++t) {
      if (trace[t] < 0 || trace[t] >= cols) throw IndexOutOfBounds("scenario trace token outside the vocabulary");
      s[j] += p(t, trace[t]);
    }
    s[j] /= static_cast<Real>(len);
  }
  // coef_j = dS/ds_j
  std::vector<Real> coef(n, 0.0);
  Real similarity = 0.0;
  if (tau == 0) {
    const auto best = static_cast<std::size_t>(std::max_element(s.begin(), s.end()) - s.begin());
    similarity = s[best];
    coef[best] = 1.0;
  } else {
    const Real m = *std::max_element(s.begin(), s.end());
    std::vector<Real> w(n);
    Real z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (w[j] = std::exp((s[j] - m) / tau));
    for (std::size_t j = 0; j < n; ++j) {
      w[j] /= z;
      similarity += w[j] * s[j];
    }
    for (std::size_t j = 0; j < n; ++j) coef[j] = w[j] * (1.0 + (s[j] - similarity) / tau);
  }
  Mat grad = Mat::Zero(len, cols);  // dS/dP
  for (std::size_t j = 0; j < n; ++j) {
    if (coef[j] == 0.0) continue;
    const auto& trace = bank[j];
    for (Eigen::Index t = 0; t < len && t < static_cast<Eigen::Index>(trace.size()); ++t) {
      grad(t, trace[t]) += coef[j] / static_cast<Real>(len);
    }
  }
  Mat y(1, 1);
  y(0, 0) = 1.0 - similarity;
  const std::size_t ia = activity_probs.id();
  return activity_probs.graph().record(std::move(y), {activity_probs},
                                       [ia, grad = std::move(grad)](Graph& g, const Mat& go) {
                                         g.accumulate(ia, grad * -go(0, 0));
                                       });
}

LossTerms total_loss(const Var& activity_probs, const Var& resource_probs, const Var& amount,
                        const EncodedQuery& query, const NextActivityModel& model,
                        std::span<const std::vector<int>> scenario_bank, const LossWeights& weights,
                        Real tau, Channel channel) {
  LossTerms t;
  const Var logits = model.forward_relaxed(activity_probs.graph(), activity_probs, resource_probs, amount);
  t.class_loss = class_loss(logits, query.desired);
  t.distance = distance_loss(activity_probs, resource_probs, query.amount_mutable ? &amount : nullptr, query,
                             model.num_activities(), model.num_resources(), channel);
  t.category = category_loss(activity_probs, resource_probs);
  t.scenario = scenario_loss(activity_probs, scenario_bank, tau);
  t.total = add(add(scale(t.class_loss, weights.w_class), scale(t.distance, weights.w_dist)),
                add(scale(t.category, weights.w_cat), scale(t.scenario, weights.w_scen)));
  return t;
}

// ---------------------------------------------------------------------------
// Seeding

CandidateTrace Seed::candidate(const NextActivityModel& model, const EncodedQuery& query) const {
  const double z = query.amount_mutable ? model.amount_stats().normalize(amount) : query.amount_norm;
  return CandidateTrace::one_hot(activities, resources, z, model.num_activities(), model.num_resources());
}

namespace {

bool seed_order(const Seed& a, const Seed& b, const KnowledgeBank& bank) {
  const auto la = bank.traces()[a.trace_index].activities.size();
  const auto lb = bank.traces()[b.trace_index].activities.size();
  return std::tie(a.distance, la, a.case_id, a.milestone_position) <
         std::tie(b.distance, lb, b.case_id, b.milestone_position);
}

Seed make_seed(const KnowledgeBank& bank, std::size_t index, std::size_t pos, const EncodedQuery& query) {
  const auto& t = bank.traces()[index];
  Seed s;
  s.trace_index = index;
  s.case_id = t.case_id;
  s.milestone_position = pos;
  s.activities.assign(t.activities.begin(), t.activities.begin() + static_cast<std::ptrdiff_t>(pos));
  s.resources.assign(t.resources.begin(), t.resources.begin() + static_cast<std::ptrdiff_t>(pos));
  s.milestone_resource = t.resources[pos];
  s.amount = t.amount;
  s.distance = levenshtein(s.activities, query.activities);
  return s;
}

std::vector<Seed> ordered_unique(std::vector<Seed> seeds, const KnowledgeBank& bank, bool amount_matters) {
  std::stable_sort(seeds.begin(), seeds.end(),
                   [&](const Seed& a, const Seed& b) { return seed_order(a, b, bank); });
  std::vector<Seed> out;
  std::set<std::tuple<std::vector<int>, std::vector<int>, int, double>> seen;
  for (auto& s : seeds) {
    auto key = std::make_tuple(s.activities, s.resources, s.milestone_resource, amount_matters ? s.amount : 0.0);
    if (seen.insert(std::move(key)).second) out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

std::vector<Seed> seed_candidates(const EncodedQuery& query, const KnowledgeBank& bank, std::size_t k) {
  if (bank.empty()) throw EmptyKnowledgeBase("knowledge bank is empty");
  std::vector<Seed> seeds;
  for (std::size_t i = 0; i < bank.size(); ++i) {
    const auto& acts = bank.traces()[i].activities;
    for (std::size_t p = 1; p < acts.size(); ++p) {
      if (acts[p] == query.desired) {
        seeds.push_back(make_seed(bank, i, p, query));
        break;
      }
    }
  }
  if (seeds.empty()) throw NoReachableMilestone("no training trace reaches the milestone");
  auto out = ordered_unique(std::move(seeds), bank, query.amount_mutable);
  if (out.size() > k) out.resize(k);
  return out;
}

std::vector<Seed> seed_pool(const EncodedQuery& query, const KnowledgeBank& bank) {
  if (bank.empty()) throw EmptyKnowledgeBase("knowledge bank is empty");
  std::vector<Seed> seeds;
  for (std::size_t i = 0; i < bank.size(); ++i) {
    const auto& acts = bank.traces()[i].activities;
    for (std::size_t p = 1; p < acts.size(); ++p) {
      if (acts[p] == query.desired) seeds.push_back(make_seed(bank, i, p, query));
    }
  }
  if (seeds.empty()) throw NoReachableMilestone("no training trace reaches the milestone");
  return ordered_unique(std::move(seeds), bank, query.amount_mutable);
}

// ---------------------------------------------------------------------------
// Optimisation

double round_amount(double amount, double granularity) {
  const double a = granularity > 0 ? std::round(amount / granularity) * granularity : amount;
  return std::max(0.0, a);
}

bool is_valid_counterfactual(std::span<const int> activities, std::span<const int> resources, double amount,
                             int desired, const NextActivityModel& model, const KnowledgeBank& bank) {
  if (activities.empty()) return false;
  if (model.predict(activities, resources, amount).index != desired) return false;
  std::vector<int> full(activities.begin(), activities.end());
  full.push_back(desired);
  return bank.is_prefix(full);
}

namespace {

// Euclidean projection of the data-token entries of every row onto the
// probability simplex; special-token columns are forced to 0.
void project_rows(Mat& m, const TokenMap& map) {
  const int lo = TokenMap::kEos + 1, hi = map.unk();
  const int n = hi - lo;
  std::vector<double> u(static_cast<std::size_t>(n));
  for (Eigen::Index t = 0; t < m.rows(); ++t) {
    for (int j = 0; j < n; ++j) u[j] = m(t, lo + j);
    std::sort(u.begin(), u.end(), std::greater<>());
    double cum = 0.0, theta = 0.0;
    for (int j = 0; j < n; ++j) {
      cum += u[j];
      const double cand = (cum - 1.0) / (j + 1);
      if (u[j] - cand > 0) theta = cand;
    }
    for (int j = 0; j < m.cols(); ++j) {
      m(t, j) = (j >= lo && j < hi) ? std::max(0.0, m(t, j) - theta) : 0.0;
    }
  }
}

LossBreakdown losses_of(const CandidateTrace& c, const EncodedQuery& query, const NextActivityModel& model,
                        std::span<const std::vector<int>> scenario_bank, const LossWeights& weights,
                        const Budget& budget) {
  Graph g;
  Mat amount(1, 1);
  amount(0, 0) = c.amount_norm;
  const auto t = total_loss(g.constant(c.activity_probs), g.constant(c.resource_probs),
                               g.constant(std::move(amount)), query, model, scenario_bank, weights, budget.tau,
                               budget.channel);
  return LossBreakdown{t.class_loss.item(), t.distance.item(), t.category.item(), t.scenario.item(), t.total.item()};
}

std::vector<Event> to_events(std::span<const int> acts, std::span<const int> res, int desired, int milestone_res,
                             const Vocabulary& vocab) {
  std::vector<Event> out;
  for (std::size_t t = 0; t < acts.size(); ++t) {
    out.push_back(Event{vocab.activities.token_of(acts[t]), vocab.resources.token_of(res[t]), {}});
  }
  out.push_back(Event{vocab.activities.token_of(desired), vocab.resources.token_of(milestone_res), {}});
  return out;
}

CounterfactualResult make_result(std::span<const int> acts, std::span<const int> res, double amount,
                                 int iterations, const Seed& seed, const EncodedQuery& query,
                                 const NextActivityModel& model, const KnowledgeBank& bank,
                                 const LossWeights& weights, const Budget& budget) {
  const auto& vocab = model.vocab();
  const double z = model.amount_stats().normalize(amount);
  const double dz = query.amount_mutable ? z : query.amount_norm;
  CounterfactualResult r;
  r.trace = to_events(acts, res, query.desired, seed.milestone_resource, vocab);
  r.amount = amount;
  const auto scen = bank.prefixes_followed_by(query.desired, acts.size());
  const auto cand = CandidateTrace::one_hot(acts, res, dz, model.num_activities(), model.num_resources());
  r.losses = scen.empty() ? LossBreakdown{} : losses_of(cand, query, model, scen, weights, budget);
  if (scen.empty()) r.losses.scenario = 1.0;
  r.proximity = proximity(acts, res, dz, query.activities, query.resources, query.amount_norm, Channel::kBoth);
  r.proximity_activity =
      proximity(acts, res, dz, query.activities, query.resources, query.amount_norm, Channel::kActivity);
  r.proximity_resource =
      proximity(acts, res, dz, query.activities, query.resources, query.amount_norm, Channel::kResource);
  r.sparsity = levenshtein(std::vector<int>(acts.begin(), acts.end()), query.activities);
  r.sparsity_resource = levenshtein(std::vector<int>(res.begin(), res.end()), query.resources);
  std::vector<int> full(acts.begin(), acts.end());
  full.push_back(query.desired);
  r.plausible = bank.is_prefix(full);
  r.iterations = iterations;
  r.seed_case_id = seed.case_id;
  return r;
}

bool past(const std::optional<Clock::time_point>& deadline) {
  return deadline && Clock::now() >= *deadline;
}

}  // namespace

OptimizeOutcome optimize(const Seed& seed, const EncodedQuery& query, const NextActivityModel& model,
                         const KnowledgeBank& bank, const LossWeights& weights, const Budget& budget,
                         const StepObserver& observer) {
  budget.validate();
  weights.validate();
  if (seed.activities.empty()) throw InvalidArgument("seed prefix must not be empty");
  const auto& vocab = model.vocab();
  const auto scen = bank.prefixes_followed_by(query.desired, seed.activities.size());
  if (scen.empty()) throw EmptyKnowledgeBase("no training prefix of this length precedes the milestone");

  CandidateTrace c = seed.candidate(model, query);
  Param pa("candidate_activities", c.activity_probs);
  Param pr("candidate_resources", c.resource_probs);
  Mat amount0(1, 1);
  amount0(0, 0) = c.amount_norm;
  Param pm("candidate_amount", amount0);
  const bool move_acts = budget.channel != Channel::kResource;
  const bool move_res = budget.channel != Channel::kActivity;

  auto amount_out = [&] {
    return query.amount_mutable
               ? round_amount(model.amount_stats().denormalize(pm.value(0, 0)), budget.amount_granularity)
               : query.amount;
  };

  std::vector<int> acts, res;
  for (int iter = 0;; ++iter) {
    if (iter % budget.check_every == 0 || iter == budget.max_iters) {
      c.activity_probs = pa.value;
      c.resource_probs = pr.value;
      std::tie(acts, res) = c.argmax(vocab);
      const double amount = amount_out();
      if (is_valid_counterfactual(acts, res, amount, query.desired, model, bank)) {
        return make_result(acts, res, amount, iter, seed, query, model, bank, weights, budget);
      }
    }
    const bool timed_out = past(budget.deadline);
    if (iter == budget.max_iters || timed_out) {
      c.activity_probs = pa.value;
      c.resource_probs = pr.value;
      std::tie(acts, res) = c.argmax(vocab);
      const double amount = amount_out();
      NotConverged nc;
      nc.trace = to_events(acts, res, query.desired, seed.milestone_resource, vocab);
      nc.amount = amount;
      const double z = query.amount_mutable ? model.amount_stats().normalize(amount) : query.amount_norm;
      nc.losses = losses_of(CandidateTrace::one_hot(acts, res, z, model.num_activities(), model.num_resources()),
                            query, model, scen, weights, budget);
      nc.iterations = iter;
      nc.seed_case_id = seed.case_id;
      nc.timed_out = timed_out;
      return nc;
    }

    pa.zero_grad();
    pr.zero_grad();
    pm.zero_grad();
    {
      Graph g;
      const Var va = move_acts ? g.parameter(pa) : g.constant(pa.value);
      const Var vr = move_res ? g.parameter(pr) : g.constant(pr.value);
      const Var vm = query.amount_mutable ? g.parameter(pm) : g.constant(pm.value);
      const auto terms = total_loss(va, vr, vm, query, model, scen, weights, budget.tau, budget.channel);
      g.backward(terms.total);
    }
    if (pa.has_grad) {
      pa.value -= budget.step * pa.grad;
      project_rows(pa.value, vocab.activities);
    }
    if (pr.has_grad) {
      pr.value -= budget.step * pr.grad;
      project_rows(pr.value, vocab.resources);
    }
    if (pm.has_grad) pm.value -= budget.step * pm.grad;
    if (observer) {
      c.activity_probs = pa.value;
      c.resource_probs = pr.value;
      c.amount_norm = pm.value(0, 0);
      observer(iter + 1, c);
    }
  }
}

Explanation explain(const EncodedQuery& query, const NextActivityModel& model, const KnowledgeBank& bank,
                    const LossWeights& weights, const Budget& budget) {
  budget.validate();
  weights.validate();
  const auto pool = seed_pool(query, bank);

  struct Entry {
    double proximity;
    std::string case_id;
    std::vector<int> activities;
    std::size_t seed;
    std::optional<CounterfactualResult> full;
    std::vector<int> resources;
    double amount;
  };
  std::vector<Entry> entries;
  std::vector<std::size_t> failing;
  Explanation out;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (past(budget.deadline)) {
      out.truncated = true;
      break;
    }
    const Seed& s = pool[i];
    ++out.seeds_checked;
    const double amount = query.amount_mutable ? round_amount(s.amount, budget.amount_granularity) : query.amount;
    if (is_valid_counterfactual(s.activities, s.resources, amount, query.desired, model, bank)) {
      const double dz = query.amount_mutable ? model.amount_stats().normalize(amount) : query.amount_norm;
      const double prox =
          proximity(s.activities, s.resources, dz, query.activities, query.resources, query.amount_norm);
      entries.push_back(Entry{prox, s.case_id, s.activities, i, std::nullopt, s.resources, amount});
    } else {
      failing.push_back(i);
    }
  }

  for (std::size_t n = 0; n < failing.size() && n < static_cast<std::size_t>(query.k); ++n) {
    if (past(budget.deadline)) {
      out.truncated = true;
      break;
    }
    ++out.seeds_optimized;
    auto result = optimize(pool[failing[n]], query, model, bank, weights, budget);
    if (auto* r = std::get_if<CounterfactualResult>(&result)) {
      std::vector<int> acts;
      for (std::size_t t = 0; t + 1 < r->trace.size(); ++t) acts.push_back(*model.vocab().activities.find(r->trace[t].activity));
      entries.push_back(Entry{r->proximity, r->seed_case_id, std::move(acts), failing[n], std::move(*r), {}, r->amount});
    } else if (std::get<NotConverged>(result).timed_out) {
      out.truncated = true;
    }
  }

  std::stable_sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    return std::tie(a.proximity, a.case_id, a.activities) < std::tie(b.proximity, b.case_id, b.activities);
  });
  std::set<std::vector<int>> seen;
  for (auto& e : entries) {
    if (out.results.size() >= static_cast<std::size_t>(query.k)) break;
    if (!seen.insert(e.activities).second) continue;
    if (e.full) {
      out.results.push_back(std::move(*e.full));
    } else {
      out.results.push_back(make_result(e.activities, e.resources, e.amount, 0, pool[e.seed], query, model, bank,
                                        weights, budget));
    }
  }
  return out;
}

std::vector<CounterfactualResult> generate(const EncodedQuery& query, const NextActivityModel& model,
                                           const KnowledgeBank& bank, const LossWeights& weights,
                                           const Budget& budget) {
  auto e = explain(query, model, bank, weights, budget);
  if (e.results.empty()) throw NoCounterfactualFound("no seed produced a valid counterfactual");
  return std::move(e.results);
}

}  // namespace milecf
