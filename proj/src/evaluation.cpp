#include "milecf/evaluation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <thread>

namespace milecf::eval {

// ---------------------------------------------------------------------------
// Process graph, plausibility, diversity

ProcessGraph ProcessGraph::mine(const std::vector<Case>& cases) {
  ProcessGraph g;
  for (const auto& c : cases) {
    for (std::size_t i = 0; i < c.events.size(); ++i) {
      g.nodes_.insert(c.events[i].activity);
      if (i > 0) ++g.edges_[{c.events[i - 1].activity, c.events[i].activity}];
    }
  }
  return g;
}

bool ProcessGraph::conforms(const std::vector<std::string>& activities) const {
  for (std::size_t i = 1; i < activities.size(); ++i) {
    if (!edges_.contains({activities[i - 1], activities[i]})) return false;
  }
  return activities.size() != 1 || nodes_.contains(activities[0]);
}

std::size_t ProcessGraph::frequency(const std::string& from, const std::string& to) const {
  const auto it = edges_.find({from, to});
  return it == edges_.end() ? 0 : it->second;
}

json ProcessGraph::to_json() const {
  json edges = json::array();
  for (const auto& [e, n] : edges_) edges.push_back({{"from", e.first}, {"to", e.second}, {"count", n}});
  return {{"nodes", nodes_}, {"edges", edges}};
}

bool plausible(std::span<const int> activities, const KnowledgeBank& bank) { return bank.is_prefix(activities); }

Diversity diversity(const std::vector<std::vector<std::string>>& traces) {
  std::set<std::vector<std::string>> distinct(traces.begin(), traces.end());
  Diversity d{distinct.size(), std::nullopt};
  for (std::size_t i = 0; i < traces.size(); ++i) {
    for (std::size_t j = i + 1; j < traces.size(); ++j) {
      const auto dist = levenshtein(traces[i], traces[j]);
      d.min_pairwise = d.min_pairwise ? std::min(*d.min_pairwise, dist) : dist;
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Suite configuration

json SuiteConfig::to_json() const {
  json qs = json::array();
  for (const auto& q : queries) qs.push_back(q.to_json());
  return {{"milestones", milestones}, {"queries", qs}};
}

SuiteConfig SuiteConfig::from_json(const json& j) {
  if (!j.is_object()) throw InvalidArgument("suite config must be an object");
  SuiteConfig c;
  try {
    if (j.contains("milestones")) c.milestones = j.at("milestones").get<std::vector<std::string>>();
    for (const auto& q : j.value("queries", json::array())) c.queries.push_back(CounterfactualQuery::from_json(q));
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("suite config: ") + e.what());
  }
  return c;
}

SuiteConfig SuiteConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open " + path.string());
  try {
    return from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw InvalidArgument(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Suite

namespace {

const BaselineDimension kDimensions[] = {BaselineDimension::kActivity, BaselineDimension::kResource};

std::string dimension_label(BaselineDimension d) { return d == BaselineDimension::kActivity ? "Activity" : "Resource"; }

std::vector<std::string> decode(std::span<const int> ids, const TokenMap& map) {
  std::vector<std::string> out;
  for (int id : ids) out.push_back(map.token_of(id));
  return out;
}

CfMetrics engine_metrics(const CounterfactualResult& r, BaselineDimension d) {
  const bool act = d == BaselineDimension::kActivity;
  return CfMetrics{act ? r.proximity_activity : r.proximity_resource, act ? r.sparsity : r.sparsity_resource,
                   r.plausible, act ? r.activities() : r.resources()};
}

CfMetrics baseline_metrics(const BaselineCandidate& c, const EncodedQuery& q, const NextActivityModel& model,
                           const KnowledgeBank& bank, BaselineDimension d) {
  const bool act = d == BaselineDimension::kActivity;
  const double z = model.amount_stats().normalize(c.amount);
  std::vector<int> full = c.activities;
  full.push_back(q.desired);
  CfMetrics m;
  m.proximity = proximity(c.activities, c.resources, z, q.activities, q.resources, q.amount_norm,
                          act ? Channel::kActivity : Channel::kResource);
  m.sparsity = act ? levenshtein(c.activities, q.activities) : levenshtein(c.resources, q.resources);
  m.plausible = plausible(full, bank);
  const auto& vocab = model.vocab();
  if (act) {
    m.trace = decode(full, vocab.activities);
  } else {
    m.trace = decode(c.resources, vocab.resources);
  }
  return m;
}

QueryOutcome run_query(const CounterfactualQuery& cq, const NextActivityModel& model, const KnowledgeBank& bank,
                       const SuiteConfig& config, const SuiteOptions& options) {
  QueryOutcome out;
  out.query = cq;
  try {
    if (std::find(config.milestones.begin(), config.milestones.end(), cq.desired_activity) ==
        config.milestones.end()) {
      throw InvalidArgument("milestone " + cq.desired_activity + " is not configured");
    }
    const auto q = encode_query(cq, model);
    const auto e = explain(q, model, bank, options.weights, options.budget);
    out.results = e.results;
    out.truncated = e.truncated;
    for (auto d : kDimensions) {
      auto bo = options.baseline;
      bo.dimension = d;
      bo.k = q.k;
      const auto b = dice_baseline(q, model, bank, bo);
      out.baseline[d] = BaselineRun{b.outcome, b.iterations, b.found};
      auto& ms = out.baseline_metrics[d];
      for (const auto& c : b.found) ms.push_back(baseline_metrics(c, q, model, bank, d));
    }
  } catch (const Error& e) {
    out.error = e.code();
    out.error_message = e.what();
  }
  return out;
}

template <typename T>
std::optional<double> mean_of(const std::vector<T>& v) {
  if (v.empty()) return std::nullopt;
  double s = 0.0;
  for (const auto& x : v) s += static_cast<double>(x);
  return s / static_cast<double>(v.size());
}

MetricRow summarize_row(const std::vector<QueryOutcome>& outcomes, bool engine, BaselineDimension d) {
  MetricRow row;
  row.generator = engine ? "MileCF" : "DiCE";
  row.dimension = d;
  std::vector<double> prox, distinct;
  std::vector<std::size_t> sparsity;
  std::size_t n_plausible = 0;
  for (const auto& o : outcomes) {
    ++row.queries;
    std::vector<CfMetrics> ms;
    if (engine) {
      for (const auto& r : o.results) ms.push_back(engine_metrics(r, d));
    } else if (const auto it = o.baseline_metrics.find(d); it != o.baseline_metrics.end()) {
      ms = it->second;
    }
    if (ms.empty()) continue;
    ++row.queries_found;
    std::vector<std::vector<std::string>> traces;
    for (const auto& m : ms) {
      prox.push_back(m.proximity);
      sparsity.push_back(m.sparsity);
      n_plausible += m.plausible ? 1 : 0;
      traces.push_back(m.trace);
    }
    const auto div = diversity(traces);
    distinct.push_back(static_cast<double>(div.distinct));
    row.diverse = row.diverse || div.distinct > 1;
  }
  row.counterfactuals = prox.size();
  row.proximity = mean_of(prox);
  row.sparsity = mean_of(sparsity);
  row.distinct = mean_of(distinct);
  if (row.counterfactuals > 0) {
    row.plausible = static_cast<double>(n_plausible) / static_cast<double>(row.counterfactuals);
  }
  row.all_plausible = row.counterfactuals > 0 && n_plausible == row.counterfactuals;
  row.categorical = row.counterfactuals > 0;
  return row;
}

std::string fixed4(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

std::string format_amount(double v) {
  char buf[64];
  if (v == std::floor(v) && std::abs(v) < 1e15) {
    std::snprintf(buf, sizeof buf, "%.0f", v);
  } else {
    std::snprintf(buf, sizeof buf, "%.2f", v);
  }
  return buf;
}

std::string render_grid(const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width;
  for (const auto& r : rows) {
    width.resize(std::max(width.size(), r.size()));
    for (std::size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], r[i].size());
  }
  std::string out;
  for (const auto& r : rows) {
    std::string line;
    for (std::size_t i = 0; i < r.size(); ++i) {
      line += r[i];
      if (i + 1 < r.size()) line += std::string(width[i] - r[i].size() + 2, ' ');
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    out += line + "\n";
  }
  return out;
}

json metrics_json(const CfMetrics& m) {
  return {{"proximity", m.proximity}, {"sparsity", m.sparsity}, {"plausible", m.plausible}, {"trace", m.trace}};
}

std::string yes_no(bool b) { return b ? "yes" : "no"; }

}  // namespace

json QueryOutcome::to_json(const Vocabulary& vocab) const {
  json j{{"query", query.to_json()}};
  if (failed()) {
    j["error"] = {{"code", error}, {"message", error_message}};
    return j;
  }
  json rs = json::array();
  for (const auto& r : results) rs.push_back(r.to_json());
  j["results"] = rs;
  j["truncated"] = truncated;
  json b = json::object();
  for (const auto& [d, run] : baseline) {
    json found = json::array();
    for (const auto& c : run.found) {
      found.push_back({{"activities", decode(c.activities, vocab.activities)},
                       {"resources", decode(c.resources, vocab.resources)},
                       {"amount", c.amount}});
    }
    json metrics = json::array();
    if (const auto it = baseline_metrics.find(d); it != baseline_metrics.end()) {
      for (const auto& m : it->second) metrics.push_back(metrics_json(m));
    }
    b[to_string(d)] = {{"outcome", to_string(run.outcome)},
                       {"iterations", run.iterations},
                       {"found", found},
                       {"metrics", metrics}};
  }
  j["baseline"] = b;
  return j;
}

json MetricRow::to_json() const {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  return {{"generator", generator},
          {"dimension", to_string(dimension)},
          {"queries", queries},
          {"queries_found", queries_found},
          {"counterfactuals", counterfactuals},
          {"proximity", opt(proximity)},
          {"sparsity", opt(sparsity)},
          {"diversity", {{"flag", diverse}, {"mean_distinct", opt(distinct)}}},
          {"plausibility", {{"flag", all_plausible}, {"ratio", opt(plausible)}}},
          {"categorical", categorical}};
}

json MetricReport::to_json(const Vocabulary& vocab) const {
  json rs = json::array(), qs = json::array();
  for (const auto& r : rows) rs.push_back(r.to_json());
  for (const auto& q : queries) qs.push_back(q.to_json(vocab));
  return {{"milestones", milestones}, {"rows", rs}, {"failed_queries", failed_queries}, {"queries", qs}};
}

std::string MetricReport::to_text() const {
  std::vector<std::vector<std::string>> grid{
      {"Algorithm", "Dimension", "Proximity", "Sparsity", "Diversity", "Plausibility", "Categorical"}};
  for (const auto& r : rows) {
    const std::string nf = "Not Found";
    grid.push_back({r.generator, dimension_label(r.dimension), r.proximity ? fixed4(*r.proximity) : nf,
                    r.sparsity ? fixed4(*r.sparsity) : nf,
                    r.distinct ? yes_no(r.diverse) + " (" + fixed4(*r.distinct) + ")" : "no",
                    r.plausible ? yes_no(r.all_plausible) + " (" + fixed4(*r.plausible) + ")" : "no",
                    yes_no(r.categorical)});
  }
  std::string out = render_grid(grid);
  for (const auto& r : rows) {
    out += r.generator + " " + dimension_label(r.dimension) + ": " + std::to_string(r.queries_found) + "/" +
           std::to_string(r.queries) + " queries, " + std::to_string(r.counterfactuals) + " counterfactuals\n";
  }
  out += "failed queries: " + std::to_string(failed_queries) + "\n";
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const auto& o = queries[i];
    const auto& q = o.query;
    out += "\nQuery " + std::to_string(i + 1) + ": milestone " + q.desired_activity + ", amount " +
           format_amount(q.amount) + (q.amount_mutable ? " (varying)" : " (fixed)") + ", k " + std::to_string(q.k) +
           "\nprefix:";
    for (const auto& [a, r] : q.prefix) out += " " + a + "/" + r;
    out += "\n";
    if (o.failed()) {
      out += "error: " + o.error + ": " + o.error_message + "\n";
      continue;
    }
    out += o.results.empty() ? std::string("MileCF: Not Found\n") : render_counterfactuals(o.results);
    if (o.truncated) out += "truncated\n";
    out += "DiCE:";
    for (const auto& [d, run] : o.baseline) {
      out += std::string(" ") + to_string(d) + " " + to_string(run.outcome) + " after " +
             std::to_string(run.iterations) + " iterations;";
    }
    out.back() = '\n';
  }
  return out;
}

std::vector<MetricRow> summarize(const std::vector<QueryOutcome>& outcomes) {
  std::vector<MetricRow> rows;
  for (bool engine : {false, true}) {
    for (auto d : kDimensions) rows.push_back(summarize_row(outcomes, engine, d));
  }
  return rows;
}

MetricReport run_milestone_suite(const NextActivityModel& model, const KnowledgeBank& bank, const SuiteConfig& config,
                                 const SuiteOptions& options) {
  options.weights.validate();
  options.budget.validate();
  MetricReport report;
  report.milestones = config.milestones;
  report.queries.resize(config.queries.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < config.queries.size(); i = next++) {
      report.queries[i] = run_query(config.queries[i], model, bank, config, options);
    }
  };
  const unsigned n = std::max(1u, std::min<unsigned>(options.threads, static_cast<unsigned>(config.queries.size())));
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (const auto& q : report.queries) report.failed_queries += q.failed() ? 1 : 0;
  report.rows = summarize(report.queries);
  return report;
}

std::string render_counterfactuals(const std::vector<CounterfactualResult>& results) {
  std::vector<std::vector<std::string>> grid(2);
  std::size_t rows = 0;
  for (std::size_t i = 0; i < results.size(); ++i) {
    grid[0].insert(grid[0].end(), {"Counterfactual " + std::to_string(i + 1), ""});
    grid[1].insert(grid[1].end(), {"Activity", "Resource"});
    rows = std::max(rows, results[i].trace.size());
  }
  for (std::size_t t = 0; t < rows; ++t) {
    std::vector<std::string> line;
    for (const auto& r : results) {
      if (t < r.trace.size()) {
        line.insert(line.end(), {r.trace[t].activity, r.trace[t].resource});
      } else {
        line.insert(line.end(), {"---", "---"});
      }
    }
    grid.push_back(line);
  }
  std::vector<std::string> amounts;
  for (const auto& r : results) amounts.insert(amounts.end(), {"AMOUNT:", format_amount(r.amount)});
  grid.push_back(amounts);
  return render_grid(grid);
}

std::vector<CounterfactualQuery> sample_queries(const std::vector<Case>& cases,
                                                const std::vector<std::string>& milestones,
                                                std::size_t per_milestone, std::uint64_t seed, int k) {
  Rng rng(seed);
  std::vector<CounterfactualQuery> out;
  for (const auto& m : milestones) {
    std::vector<std::size_t> order(cases.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    shuffle(std::span<std::size_t>(order), rng);
    std::size_t taken = 0;
    for (std::size_t idx : order) {
      if (taken == per_milestone) break;
      const auto& c = cases[idx];
      std::vector<std::size_t> cuts;
      for (std::size_t len = 1; len < c.events.size(); ++len) {
        if (c.events[len - 1].activity == m) break;
        if (len >= 2 && c.events[len].activity != m) cuts.push_back(len);
      }
      if (cuts.empty()) continue;
      const std::size_t len = cuts[uniform_index(rng, cuts.size())];
      CounterfactualQuery q;
      for (std::size_t e = 0; e < len; ++e) q.prefix.emplace_back(c.events[e].activity, c.events[e].resource);
      q.amount = c.amount;
      q.desired_activity = m;
      q.amount_mutable = taken % 2 == 1;
      q.k = k;
      out.push_back(std::move(q));
      ++taken;
    }
  }
  return out;
}

}  // namespace milecf::eval
