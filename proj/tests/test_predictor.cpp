#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "predictor_gradcheck.hpp"
#include "milecf/predictor.hpp"
#include "milecf/synthgen.hpp"

using namespace milecf;

namespace {

EventLog chain_log(int n_cases) {
  std::vector<Case> cases;
  for (int i = 0; i < n_cases; ++i) {
    Case c;
    c.case_id = "c" + std::to_string(i);
    c.amount = 1000.0 + 250.0 * (i % 7);
    c.events = {{"a", "r1", {}}, {"b", "r2", {}}, {"c", "r1", {}}};
    cases.push_back(std::move(c));
  }
  EventLog log;
  log.vocab = Vocabulary::build(cases);
  log.cases = std::move(cases);
  return log;
}

ModelConfig small_config() {
  ModelConfig c;
  c.activity_embed_dim = 3;
  c.resource_embed_dim = 4;
  c.lstm_hidden = 5;
  c.dense_dim = 3;
  c.max_len = 6;
  c.epochs = 2;
  c.batch_size = 16;
  return c;
}

EventLog small_synth_log(int n) {
  synth::SynthConfig sc;
  sc.n_cases = n;
  sc.seed = 7;
  return synth::generate(sc);
}

std::vector<PrefixSample> samples_of(const NextActivityModel& m, const EventLog& log) {
  return build_prefixes(EventLog{log.cases, m.vocab()}, m.config().max_len, m.amount_stats());
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("milecf_test_" + name);
}

}  // namespace

TEST_CASE("forward on a single prefix yields one finite row per activity") {
  const auto log = small_synth_log(20);
  NextActivityModel m(log.vocab, AmountStats::from_cases(log.cases), small_config());
  const auto samples = samples_of(m, log);
  const Mat z = m.logits(std::span<const PrefixSample>(samples).first(1));
  CHECK(z.rows() == 1);
  CHECK(z.cols() == m.num_activities());
  CHECK(z.allFinite());
}

TEST_CASE("identical samples give identical rows without dropout") {
  const auto log = small_synth_log(20);
  NextActivityModel m(log.vocab, AmountStats::from_cases(log.cases), small_config());
  const auto samples = samples_of(m, log);
  std::vector<PrefixSample> pair{samples[5], samples[5]};
  const Mat z = m.logits(pair);
  CHECK(z.row(0) == z.row(1));
}

TEST_CASE("a model with zero weights is uniform over the unmasked activities") {
  const auto log = small_synth_log(20);
  NextActivityModel m(log.vocab, AmountStats::from_cases(log.cases), small_config());
  m.zero_parameters();
  const auto& c = log.cases.front();
  const auto p = m.predict_next({{c.events[0].activity, c.events[0].resource}}, c.amount);
  const int n = m.num_activities();
  const double expected = 1.0 / (n - 2);  // PAD and UNK are masked
  for (int j = 0; j < n; ++j) {
    if (j == TokenMap::kPad || j == m.vocab().activities.unk()) {
      CHECK(p.probabilities[j] == 0.0);
    } else {
      CHECK(p.probabilities[j] == doctest::Approx(expected).epsilon(1e-12));
    }
  }
  CHECK(p.index == TokenMap::kEos);  // lowest index among the tied maxima
}

TEST_CASE("masked classes get zero probability on arbitrary prefixes") {
  const auto log = small_synth_log(30);
  NextActivityModel m(log.vocab, AmountStats::from_cases(log.cases), small_config());
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto len = 1 + uniform_index(rng, 8);
    std::vector<int> acts, res;
    for (std::size_t i = 0; i < len; ++i) {
      acts.push_back(static_cast<int>(uniform_index(rng, m.num_activities())));
      res.push_back(static_cast<int>(uniform_index(rng, m.num_resources())));
    }
    const auto p = m.predict(acts, res, uniform(rng, 0.0, 60000.0));
    CHECK(p.probabilities[TokenMap::kPad] == 0.0);
    CHECK(p.probabilities[m.vocab().activities.unk()] == 0.0);
    CHECK(p.index != TokenMap::kPad);
    CHECK(p.index != m.vocab().activities.unk());
    double total = 0.0;
    for (double v : p.probabilities) total += v;
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("relaxed forward on one-hot rows matches the indexed forward") {
  const auto log = small_synth_log(20);
  NextActivityModel m(log.vocab, AmountStats::from_cases(log.cases), small_config());
  const auto samples = samples_of(m, log);
  for (std::size_t k : {0u, 3u, 7u}) {
    const auto& s = samples[k];
    Mat a = Mat::Zero(s.seq_len, m.num_activities());
    Mat r = Mat::Zero(s.seq_len, m.num_resources());
    for (int t = 0; t < s.seq_len; ++t) {
      a(t, s.activity_ids[t]) = 1.0;
      r(t, s.resource_ids[t]) = 1.0;
    }
    Graph g;
    Mat amount(1, 1);
    amount(0, 0) = s.amount_norm;
    const Var z = m.forward_relaxed(g, g.constant(a), g.constant(r), g.constant(amount));
    const Mat expected = m.logits(std::span<const PrefixSample>(&s, 1));
    CHECK((z.value() - expected).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("relaxed forward rejects mismatched shapes") {
  const auto log = small_synth_log(10);
  NextActivityModel m(log.vocab, AmountStats::from_cases(log.cases), small_config());
  Graph g;
  const Var one = g.constant(Mat::Zero(1, 1));
  CHECK_THROWS_AS(m.forward_relaxed(g, g.constant(Mat::Zero(2, m.num_activities())),
                                    g.constant(Mat::Zero(3, m.num_resources())), one),
                  ShapeMismatch);
  CHECK_THROWS_AS(m.forward_relaxed(g, g.constant(Mat::Zero(2, 2)),
                                    g.constant(Mat::Zero(2, m.num_resources())), one),
                  ShapeMismatch);
}

TEST_CASE("full predictor gradient matches finite differences") {
  const auto log = small_synth_log(6);
  auto cfg = small_config();
  cfg.dropout = 0.0;
  NextActivityModel m(log.vocab, AmountStats::from_cases(log.cases), cfg);
  // Spread the embeddings so the check is not dominated by tiny values.
  Rng rng(11);
  for (auto* p : m.parameters()) p->value = testing::random_matrix(p->value.rows(), p->value.cols(), rng, -0.5, 0.5);
  const auto all = samples_of(m, log);
  std::vector<PrefixSample> batch(all.begin(), all.begin() + 9);
  const double worst = testing::predictor_gradient_error(m, batch);
  CHECK(worst < 1e-4);
}

TEST_CASE("training on a deterministic chain is exact") {
  ModelConfig cfg;
  cfg.max_len = 5;
  std::vector<double> seen;
  const auto out = train(chain_log(200), cfg, [&](int, double loss) { seen.push_back(loss); });
  REQUIRE(out.epoch_losses.size() == 20);
  CHECK(seen == out.epoch_losses);
  for (double l : out.epoch_losses) CHECK(std::isfinite(l));
  CHECK(out.epoch_losses[1] < out.epoch_losses[0]);
  CHECK(out.epoch_losses[2] < out.epoch_losses[1]);
  CHECK(out.report.accuracy == 1.0);
  CHECK(out.report.support == 3 * 40);

  const auto b = out.model.predict_next({{"a", "r1"}}, 1500.0);
  CHECK(b.activity == "b");
  CHECK(b.probabilities[b.index] > 0.95);
  const auto eos = out.model.predict_next({{"a", "r1"}, {"b", "r2"}, {"c", "r1"}}, 1500.0);
  CHECK(eos.index == TokenMap::kEos);
}

TEST_CASE("training is reproducible and checkpoints are byte-identical") {
  const auto log = small_synth_log(40);
  const auto cfg = small_config();
  const auto a = train(log, cfg);
  const auto b = train(log, cfg);
  const auto pa = temp_path("ckpt_a.json"), pb = temp_path("ckpt_b.json");
  a.model.save(pa);
  b.model.save(pb);
  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
  };
  CHECK(slurp(pa) == slurp(pb));
  CHECK(a.epoch_losses == b.epoch_losses);

  auto other = cfg;
  other.seed = 43;
  CHECK(train(log, other).model.to_json() != a.model.to_json());
  std::filesystem::remove(pa);
  std::filesystem::remove(pb);
}

TEST_CASE("checkpoint round-trip preserves every logit") {
  const auto log = small_synth_log(30);
  const auto out = train(log, small_config());
  const auto path = temp_path("ckpt_roundtrip.json");
  out.model.save(path);
  const auto loaded = NextActivityModel::load(path);
  CHECK(loaded.vocab() == out.model.vocab());
  CHECK(loaded.amount_stats().mean == out.model.amount_stats().mean);
  CHECK(loaded.amount_stats().std == out.model.amount_stats().std);
  CHECK(loaded.config().to_json() == out.model.config().to_json());
  const auto samples = samples_of(out.model, log);
  CHECK(loaded.logits(samples) == out.model.logits(samples));
  std::filesystem::remove(path);
}

TEST_CASE("damaged checkpoints are rejected") {
  const auto log = small_synth_log(10);
  NextActivityModel m(log.vocab, AmountStats::from_cases(log.cases), small_config());
  const auto path = temp_path("ckpt_damaged.json");
  const std::string text = m.to_json().dump(1);

  SUBCASE("truncated file") {
    std::ofstream(path, std::ios::binary) << text.substr(0, text.size() / 2);
    CHECK_THROWS_AS(NextActivityModel::load(path), CorruptCheckpoint);
  }
  SUBCASE("wrong version") {
    auto j = m.to_json();
    j["version"] = "milecf-checkpoint/0";
    CHECK_THROWS_AS(NextActivityModel::from_json(j), VersionMismatch);
  }
  SUBCASE("missing version") {
    auto j = m.to_json();
    j.erase("version");
    CHECK_THROWS_AS(NextActivityModel::from_json(j), CorruptCheckpoint);
  }
  SUBCASE("missing parameter") {
    auto j = m.to_json();
    j["parameters"].erase("head_bias");
    CHECK_THROWS_AS(NextActivityModel::from_json(j), CorruptCheckpoint);
  }
  SUBCASE("wrong parameter shape") {
    auto j = m.to_json();
    j["parameters"]["head_bias"]["data"].push_back(0.0);
    CHECK_THROWS_AS(NextActivityModel::from_json(j), CorruptCheckpoint);
  }
  std::filesystem::remove(path);
}

TEST_CASE("evaluation metrics follow from the confusion matrix") {
  const auto log = small_synth_log(60);
  const auto out = train(log, small_config());
  const auto& r = out.report;
  std::size_t total = 0, correct = 0;
  const std::size_t n = r.confusion.size();
  std::vector<std::size_t> row(n, 0), col(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      total += r.confusion[i][j];
      row[i] += r.confusion[i][j];
      col[j] += r.confusion[i][j];
    }
    correct += r.confusion[i][i];
  }
  CHECK(total == r.support);
  CHECK(r.accuracy == static_cast<double>(correct) / static_cast<double>(total));
  double p = 0, rc = 0, f = 0;
  int classes = 0;
  for (std::size_t c = 0; c < n; ++c) {
    if (row[c] == 0 && col[c] == 0) continue;
    ++classes;
    const double tp = static_cast<double>(r.confusion[c][c]);
    const double pc = col[c] ? tp / static_cast<double>(col[c]) : 0.0;
    const double rcc = row[c] ? tp / static_cast<double>(row[c]) : 0.0;
    p += pc;
    rc += rcc;
    f += pc + rcc > 0 ? 2 * pc * rcc / (pc + rcc) : 0.0;
  }
  CHECK(r.macro_precision == p / classes);
  CHECK(r.macro_recall == rc / classes);
  CHECK(r.macro_f1 == f / classes);
}

TEST_CASE("report metrics stay in the unit interval on random confusion matrices") {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + uniform_index(rng, 6);
    std::vector<std::vector<std::size_t>> cm(n, std::vector<std::size_t>(n));
    std::vector<std::size_t> support(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        cm[i][j] = uniform_index(rng, 2) ? uniform_index(rng, 10) : 0;
        support[i] += cm[i][j];
      }
    }
    const auto r = EvalReport::from_confusion(cm);
    for (double v : {r.accuracy, r.macro_precision, r.macro_recall, r.macro_f1}) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t s = 0;
      for (auto v : r.confusion[i]) s += v;
      CHECK(s == support[i]);
    }
  }
  CHECK_THROWS_AS(EvalReport::from_confusion({{1, 2}, {3}}), ShapeMismatch);
}

TEST_CASE("prediction input validation") {
  const auto log = small_synth_log(10);
  NextActivityModel m(log.vocab, AmountStats::from_cases(log.cases), small_config());
  CHECK_THROWS_AS(m.predict_next({}, 1000.0), InvalidArgument);
  CHECK_NOTHROW(m.predict_next({{"NOT_AN_ACTIVITY", "nobody"}}, 1000.0));
  CHECK_THROWS_AS(m.predict_next({{"NOT_AN_ACTIVITY", "nobody"}}, 1000.0, UnkPolicy::kThrow),
                  UnknownToken);
  const int bad = m.num_activities();
  std::vector<int> acts{bad}, res{2};
  CHECK_THROWS_AS(m.predict(acts, res, 1000.0), IndexOutOfBounds);
}

TEST_CASE("model configuration validation and JSON round-trip") {
  ModelConfig c;
  CHECK(c.activity_embed_dim == 32);
  CHECK(c.resource_embed_dim == 128);
  CHECK(c.lstm_hidden == 64);
  CHECK(c.dense_dim == 64);
  CHECK(c.dropout == 0.1);
  CHECK(c.epochs == 20);
  CHECK(c.batch_size == 128);
  CHECK(c.learning_rate == 0.005);
  c.seed = 99;
  c.dropout = 0.25;
  CHECK(ModelConfig::from_json(c.to_json()).to_json() == c.to_json());
  CHECK(ModelConfig::from_json(json{{"epochs", 3}}).epochs == 3);
  CHECK_THROWS_AS(ModelConfig::from_json(json{{"dropout", 1.0}}), InvalidArgument);
  CHECK_THROWS_AS(ModelConfig::from_json(json{{"lstm_hidden", 0}}), InvalidArgument);
  CHECK_THROWS_AS(ModelConfig::from_json(json{{"epochs", "many"}}), InvalidArgument);
}

TEST_CASE("training rejects an empty log") {
  CHECK_THROWS_AS(train(EventLog{}, ModelConfig{}), EmptyLog);
}

TEST_CASE("parameter count for the default dimensions") {
  const auto log = chain_log(4);
  NextActivityModel m(log.vocab, AmountStats::from_cases(log.cases), ModelConfig{});
  const std::size_t a = m.num_activities(), r = m.num_resources();
  const std::size_t expected = a * 32 + r * 128 + 160 * 256 + 64 * 256 + 256 + 64 + 64 + 128 * a + a;
  CHECK(m.parameter_count() == expected);
}
