#include "milecf/predictor.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace milecf {

using num::add;
using num::concat_cols;
using num::matmul;
using num::mul;
using num::scale_rows;
using num::sigmoid;
using num::slice_cols;
using num::slice_rows;

// ---------------------------------------------------------------------------
// ModelConfig

void ModelConfig::validate() const {
  if (activity_embed_dim <= 0 || resource_embed_dim <= 0 || lstm_hidden <= 0 || dense_dim <= 0) {
    throw InvalidArgument("model dimensions must be positive");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw InvalidArgument("dropout must lie in [0, 1)");
  if (epochs < 0) throw InvalidArgument("epochs must be non-negative");
  if (batch_size <= 0) throw InvalidArgument("batch_size must be positive");
  if (!(learning_rate > 0.0)) throw InvalidArgument("learning_rate must be positive");
  if (max_len < 2) throw InvalidArgument("max_len must be at least 2");
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw InvalidArgument("test_fraction must lie in (0, 1)");
  }
}

json ModelConfig::to_json() const {
  return json{{"activity_embed_dim", activity_embed_dim},
              {"resource_embed_dim", resource_embed_dim},
              {"lstm_hidden", lstm_hidden},
              {"dense_dim", dense_dim},
              {"dropout", dropout},
              {"epochs", epochs},
              {"batch_size", batch_size},
              {"learning_rate", learning_rate},
              {"seed", seed},
              {"max_len", max_len},
              {"test_fraction", test_fraction}};
}

ModelConfig ModelConfig::from_json(const json& j) { return from_json(j, ModelConfig{}); }

ModelConfig ModelConfig::from_json(const json& j, ModelConfig base) {
  if (!j.is_object()) throw InvalidArgument("model config must be a JSON object");
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("activity_embed_dim", base.activity_embed_dim);
    get("resource_embed_dim", base.resource_embed_dim);
    get("lstm_hidden", base.lstm_hidden);
    get("dense_dim", base.dense_dim);
    get("dropout", base.dropout);
    get("epochs", base.epochs);
    get("batch_size", base.batch_size);
    get("learning_rate", base.learning_rate);
    get("seed", base.seed);
    get("max_len", base.max_len);
    get("test_fraction", base.test_fraction);
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("model config: ") + e.what());
  }
  base.validate();
  return base;
}

// ---------------------------------------------------------------------------
// EvalReport

EvalReport EvalReport::from_confusion(std::vector<std::vector<std::size_t>> confusion) {
  EvalReport r;
  const std::size_t n = confusion.size();
  std::vector<std::size_t> row(n, 0), col(n, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (confusion[i].size() != n) throw ShapeMismatch("confusion matrix must be square");
    for (std::size_t j = 0; j < n; ++j) {
      row[i] += confusion[i][j];
      col[j] += confusion[i][j];
      r.support += confusion[i][j];
    }
    correct += confusion[i][i];
  }
  if (r.support > 0) r.accuracy = static_cast<double>(correct) / static_cast<double>(r.support);
  std::size_t classes = 0;
  for (std::size_t c = 0; c < n; ++c) {
    if (row[c] == 0 && col[c] == 0) continue;
    ++classes;
    const double tp = static_cast<double>(confusion[c][c]);
    const double p = col[c] > 0 ? tp / static_cast<double>(col[c]) : 0.0;
    const double rc = row[c] > 0 ? tp / static_cast<double>(row[c]) : 0.0;
    r.macro_precision += p;
    r.macro_recall += rc;
    r.macro_f1 += p + rc > 0 ? 2 * p * rc / (p + rc) : 0.0;
  }
  if (classes > 0) {
    r.macro_precision /= static_cast<double>(classes);
    r.macro_recall /= static_cast<double>(classes);
    r.macro_f1 /= static_cast<double>(classes);
  }
  r.confusion = std::move(confusion);
  return r;
}

json EvalReport::to_json() const {
  return json{{"accuracy", accuracy},
              {"macro_precision", macro_precision},
              {"macro_recall", macro_recall},
              {"macro_f1", macro_f1},
              {"support", support},
              {"confusion", confusion}};
}

// ---------------------------------------------------------------------------
// NextActivityModel

namespace {

Mat glorot(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = uniform(rng, -limit, limit);
  return m;
}

Mat uniform_matrix(Eigen::Index rows, Eigen::Index cols, double limit, Rng& rng) {
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = uniform(rng, -limit, limit);
  return m;
}

}  // namespace

NextActivityModel::NextActivityModel(Vocabulary vocab, AmountStats stats, ModelConfig config)
    : vocab_(std::move(vocab)), stats_(stats), config_(config) {
  config_.validate();
  Rng rng(config_.seed);
  const int na = num_activities(), nr = num_resources();
  const int ea = config_.activity_embed_dim, er = config_.resource_embed_dim;
  const int h = config_.lstm_hidden, d = config_.dense_dim;

  activity_embedding_ = Param("activity_embedding", uniform_matrix(na, ea, 0.05, rng));
  resource_embedding_ = Param("resource_embedding", uniform_matrix(nr, er, 0.05, rng));
  lstm_input_ = Param("lstm_input", glorot(ea + er, 4 * h, rng));
  lstm_recurrent_ = Param("lstm_recurrent", glorot(h, 4 * h, rng));
  Mat bias = Mat::Zero(1, 4 * h);
  bias.middleCols(h, h).setOnes();
  lstm_bias_ = Param("lstm_bias", std::move(bias));
  amount_weight_ = Param("amount_weight", glorot(1, d, rng));
  amount_bias_ = Param("amount_bias", Mat::Zero(1, d));
  head_weight_ = Param("head_weight", glorot(h + d, na, rng));
  head_bias_ = Param("head_bias", Mat::Zero(1, na));
  for (auto* p : parameters()) p->zero_grad();
}

std::vector<Param*> NextActivityModel::parameters() {
  return {&activity_embedding_, &resource_embedding_, &lstm_input_,
          &lstm_recurrent_,     &lstm_bias_,          &amount_weight_,
          &amount_bias_,        &head_weight_,        &head_bias_};
}

std::vector<const Param*> NextActivityModel::parameters() const {
  auto ps = const_cast<NextActivityModel*>(this)->parameters();
  return {ps.begin(), ps.end()};
}

std::size_t NextActivityModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto* p : parameters()) n += static_cast<std::size_t>(p->value.size());
  return n;
}

void NextActivityModel::zero_parameters() {
  for (auto* p : parameters()) p->value.setZero();
}

Mat NextActivityModel::logit_mask() const {
  Mat m = Mat::Zero(1, num_activities());
  m(0, TokenMap::kPad) = kMaskedLogit;
  m(0, vocab_.activities.unk()) = kMaskedLogit;
  return m;
}

template <typename Bind>
Var NextActivityModel::head(Graph& g, const Var& hidden, const Var& amount, Bind bind,
                            Rng* rng) const {
  const Var dense = num::tanh(add(matmul(amount, bind(amount_weight_)), bind(amount_bias_)));
  Var features = concat_cols(hidden, dense);
  if (rng) features = num::dropout(features, config_.dropout, true, *rng);
  const Var logits = add(matmul(features, bind(head_weight_)), bind(head_bias_));
  return add(logits, g.constant(logit_mask()));
}

template <typename Bind>
Var NextActivityModel::run_batch(Graph& g, std::span<const PrefixSample> batch, Bind bind,
                                 Rng* rng) const {
  if (batch.empty()) throw InvalidArgument("forward on an empty batch");
  const auto b = static_cast<Eigen::Index>(batch.size());
  const int h = config_.lstm_hidden;
  int steps = 0;
  for (const auto& s : batch) {
    if (s.seq_len < 1 || static_cast<std::size_t>(s.seq_len) > s.activity_ids.size() ||
        s.resource_ids.size() != s.activity_ids.size()) {
      throw ShapeMismatch("prefix sample has inconsistent length");
    }
    steps = std::max(steps, s.seq_len);
  }

  // Time-major rows: row t * b + i holds position t of sample i.
  std::vector<int> acts, res;
  acts.reserve(static_cast<std::size_t>(steps * b));
  res.reserve(static_cast<std::size_t>(steps * b));
  for (int t = 0; t < steps; ++t) {
    for (const auto& s : batch) {
      acts.push_back(s.activity_ids[t]);
      res.push_back(s.resource_ids[t]);
    }
  }
  Var x = concat_cols(num::embedding_lookup(bind(activity_embedding_), std::span<const int>(acts)),
                      num::embedding_lookup(bind(resource_embedding_), std::span<const int>(res)));
  if (rng) x = num::dropout(x, config_.dropout, true, *rng);
  const Var xw = matmul(x, bind(lstm_input_));
  const Var w_rec = bind(lstm_recurrent_);
  const Var bias = bind(lstm_bias_);

  Var hs = g.constant(Mat::Zero(b, h));
  Var cs = g.constant(Mat::Zero(b, h));
  Var last;
  bool have_last = false;
  std::vector<Real> select(static_cast<std::size_t>(b));
  for (int t = 0; t < steps; ++t) {
    const Var z = add(add(slice_rows(xw, t * b, b), matmul(hs, w_rec)), bias);
    const Var i = sigmoid(slice_cols(z, 0, h));
    const Var f = sigmoid(slice_cols(z, h, h));
    const Var gg = num::tanh(slice_cols(z, 2 * h, h));
    const Var o = sigmoid(slice_cols(z, 3 * h, h));
    cs = add(mul(f, cs), mul(i, gg));
    hs = mul(o, num::tanh(cs));

    bool any = false;
    for (Eigen::Index k = 0; k < b; ++k) {
      select[k] = batch[k].seq_len - 1 == t ? 1.0 : 0.0;
      any = any || select[k] != 0.0;
    }
    if (!any) continue;
    const Var picked = scale_rows(hs, std::span<const Real>(select));
    last = have_last ? add(last, picked) : picked;
    have_last = true;
  }

  Mat amounts(b, 1);
  for (Eigen::Index k = 0; k < b; ++k) amounts(k, 0) = batch[k].amount_norm;
  return head(g, last, g.constant(std::move(amounts)), bind, rng);
}

Var NextActivityModel::forward(Graph& g, std::span<const PrefixSample> batch, bool trainable,
                               Rng* rng) {
  if (trainable) {
    return run_batch(g, batch, [&g](const Param& p) { return g.parameter(const_cast<Param&>(p)); },
                     rng);
  }
  return run_batch(g, batch, [&g](const Param& p) { return g.constant(p.value); }, rng);
}

Mat NextActivityModel::logits(std::span<const PrefixSample> batch) const {
  Graph g;
  return run_batch(g, batch, [&g](const Param& p) { return g.constant(p.value); }, nullptr).value();
}

Var NextActivityModel::forward_relaxed(Graph& g, const Var& activity_probs,
                                       const Var& resource_probs, const Var& amount_norm) const {
  const Eigen::Index len = activity_probs.rows();
  if (len < 1 || resource_probs.rows() != len) {
    throw ShapeMismatch("relaxed activity and resource sequences differ in length");
  }
  if (activity_probs.cols() != num_activities() || resource_probs.cols() != num_resources()) {
    throw ShapeMismatch("relaxed sequence width differs from the vocabulary size");
  }
  if (amount_norm.rows() != 1 || amount_norm.cols() != 1) {
    throw ShapeMismatch("relaxed amount must be 1x1");
  }
  auto bind = [&g](const Param& p) { return g.constant(p.value); };
  const int h = config_.lstm_hidden;
  const Var x = concat_cols(matmul(activity_probs, bind(activity_embedding_)),
                            matmul(resource_probs, bind(resource_embedding_)));
  const Var xw = matmul(x, bind(lstm_input_));
  const Var w_rec = bind(lstm_recurrent_);
  const Var bias = bind(lstm_bias_);
  Var hs = g.constant(Mat::Zero(1, h));
  Var cs = g.constant(Mat::Zero(1, h));
  for (Eigen::Index t = 0; t < len; ++t) {
    const Var z = add(add(slice_rows(xw, t, 1), matmul(hs, w_rec)), bias);
    const Var i = sigmoid(slice_cols(z, 0, h));
    const Var f = sigmoid(slice_cols(z, h, h));
    const Var gg = num::tanh(slice_cols(z, 2 * h, h));
    const Var o = sigmoid(slice_cols(z, 3 * h, h));
    cs = add(mul(f, cs), mul(i, gg));
    hs = mul(o, num::tanh(cs));
  }
  return head(g, hs, amount_norm, bind, nullptr);
}

namespace {

std::vector<Real> masked_softmax(const Mat& logits_row) {
  const double m = logits_row.maxCoeff();
  std::vector<Real> p(static_cast<std::size_t>(logits_row.cols()));
  double total = 0.0;
  for (Eigen::Index j = 0; j < logits_row.cols(); ++j) {
    p[j] = std::exp(logits_row(0, j) - m);
    total += p[j];
  }
  for (auto& v : p) v /= total;
  return p;
}

int argmax(const std::vector<Real>& p) {
  int best = 0;
  for (int j = 1; j < static_cast<int>(p.size()); ++j) {
    if (p[j] > p[best]) best = j;
  }
  return best;
}

}  // namespace

Prediction NextActivityModel::predict(std::span<const int> activities,
                                      std::span<const int> resources, double amount) const {
  if (activities.empty()) throw InvalidArgument("prefix must not be empty");
  if (activities.size() != resources.size()) {
    throw ShapeMismatch("activity and resource prefixes differ in length");
  }
  const PrefixSample s =
      encode_prefix(activities, resources, stats_.normalize(amount), config_.max_len);
  const Mat z = logits(std::span<const PrefixSample>(&s, 1));
  Prediction out;
  out.probabilities = masked_softmax(z);
  out.index = argmax(out.probabilities);
  out.activity = vocab_.activities.token_of(out.index);
  return out;
}

Prediction NextActivityModel::predict_next(
    const std::vector<std::pair<std::string, std::string>>& prefix, double amount,
    UnkPolicy policy) const {
  std::vector<int> acts, res;
  acts.reserve(prefix.size());
  res.reserve(prefix.size());
  for (const auto& [a, r] : prefix) {
    acts.push_back(vocab_.activities.encode(a, policy));
    res.push_back(vocab_.resources.encode(r, policy));
  }
  return predict(acts, res, amount);
}

EvalReport NextActivityModel::evaluate(const EventLog& log) const {
  const EventLog view{log.cases, vocab_};
  const auto samples = build_prefixes(view, config_.max_len, stats_);
  const auto n = static_cast<std::size_t>(num_activities());
  std::vector<std::vector<std::size_t>> confusion(n, std::vector<std::size_t>(n, 0));
  const std::size_t chunk = static_cast<std::size_t>(config_.batch_size);
  for (std::size_t start = 0; start < samples.size(); start += chunk) {
    const auto batch =
        std::span<const PrefixSample>(samples).subspan(start, std::min(chunk, samples.size() - start));
    const Mat z = logits(batch);
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
      const int pred = argmax(masked_softmax(z.row(r)));
      ++confusion[batch[r].label][pred];
    }
  }
  return EvalReport::from_confusion(std::move(confusion));
}

// ---------------------------------------------------------------------------
// Checkpoints

json NextActivityModel::to_json() const {
  json params = json::object();
  for (const auto* p : parameters()) {
    params[p->name] = json{{"shape", {p->value.rows(), p->value.cols()}},
                           {"data", std::vector<Real>(p->value.data(), p->value.data() + p->value.size())}};
  }
  return json{{"version", kCheckpointVersion},
              {"config", config_.to_json()},
              {"vocabulary", milecf::to_json(vocab_)},
              {"amount_stats", {{"mean", stats_.mean}, {"std", stats_.std}}},
              {"parameters", std::move(params)}};
}

NextActivityModel NextActivityModel::from_json(const json& j) {
  if (!j.is_object() || !j.contains("version")) throw CorruptCheckpoint("checkpoint has no version tag");
  if (!j.at("version").is_string() || j.at("version").get<std::string>() != kCheckpointVersion) {
    throw VersionMismatch("checkpoint version " + j.at("version").dump() + ", expected " +
                          kCheckpointVersion);
  }
  try {
    const ModelConfig config = ModelConfig::from_json(j.at("config"));
    const Vocabulary vocab = vocabulary_from_json(j.at("vocabulary"));
    AmountStats stats;
    stats.mean = j.at("amount_stats").at("mean").get<double>();
    stats.std = j.at("amount_stats").at("std").get<double>();
    NextActivityModel model(vocab, stats, config);
    const json& params = j.at("parameters");
    for (auto* p : model.parameters()) {
      const json& entry = params.at(p->name);
      const auto shape = entry.at("shape").get<std::vector<Eigen::Index>>();
      const auto data = entry.at("data").get<std::vector<Real>>();
      if (shape.size() != 2 || shape[0] != p->value.rows() || shape[1] != p->value.cols() ||
          static_cast<Eigen::Index>(data.size()) != p->value.size()) {
        throw CorruptCheckpoint("parameter '" + p->name + "' has the wrong shape");
      }
      std::copy(data.begin(), data.end(), p->value.data());
    }
    return model;
  } catch (const json::exception& e) {
    throw CorruptCheckpoint(std::string("malformed checkpoint: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw CorruptCheckpoint(std::string("malformed checkpoint: ") + e.what());
  }
}

void NextActivityModel::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidArgument("cannot write checkpoint " + path.string());
  out << to_json().dump(1) << '\n';
  if (!out) throw InvalidArgument("failed writing checkpoint " + path.string());
}

NextActivityModel NextActivityModel::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidArgument("cannot open checkpoint " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  json j;
  try {
    j = json::parse(buf.str());
  } catch (const json::exception& e) {
    throw CorruptCheckpoint(std::string("checkpoint is not valid JSON: ") + e.what());
  }
  return from_json(j);
}

// ---------------------------------------------------------------------------
// Training

namespace {

// Shuffled, then sorted by length inside large chunks so that batches pad
// little, then the batch order is shuffled again.
std::vector<std::span<const PrefixSample>> bucket_batches(std::vector<PrefixSample>& ordered,
                                                          const std::vector<PrefixSample>& samples,
                                                          std::size_t batch_size, Rng& rng) {
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  shuffle(std::span(order), rng);
  const std::size_t chunk = batch_size * 50;
  for (std::size_t start = 0; start < order.size(); start += chunk) {
    const auto first = order.begin() + static_cast<std::ptrdiff_t>(start);
    const auto last = order.begin() + static_cast<std::ptrdiff_t>(std::min(start + chunk, order.size()));
    std::stable_sort(first, last, [&](std::size_t a, std::size_t b) {
      return samples[a].seq_len < samples[b].seq_len;
    });
  }
  ordered.clear();
  ordered.reserve(samples.size());
  for (auto i : order) ordered.push_back(samples[i]);

  std::vector<std::span<const PrefixSample>> batches;
  for (std::size_t start = 0; start < ordered.size(); start += batch_size) {
    batches.push_back(std::span<const PrefixSample>(ordered).subspan(
        start, std::min(batch_size, ordered.size() - start)));
  }
  shuffle(std::span(batches), rng);
  return batches;
}

}  // namespace

TrainOutcome train_on_split(const EventLog& train_log, const EventLog& test_log,
                            const ModelConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  if (train_log.cases.empty()) throw EmptyLog("training log has no cases");
  const AmountStats stats = AmountStats::from_cases(train_log.cases);
  NextActivityModel model(train_log.vocab, stats, config);
  const auto samples = build_prefixes(train_log, config.max_len, stats);

  num::Adam<Real>::Options opt;
  opt.learning_rate = config.learning_rate;
  num::Adam<Real> adam(opt);
  const auto params = model.parameters();
  Rng rng(config.seed + 1);
  std::vector<PrefixSample> ordered;
  std::vector<double> losses;
  std::vector<int> labels;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto batches =
        bucket_batches(ordered, samples, static_cast<std::size_t>(config.batch_size), rng);
    double total = 0.0;
    for (const auto& batch : batches) {
      Graph g;
      const Var z = model.forward(g, batch, true, &rng);
      labels.clear();
      for (const auto& s : batch) labels.push_back(s.label);
      const Var loss = num::cross_entropy(z, std::span<const int>(labels));
      total += loss.item() * static_cast<double>(batch.size());
      g.backward(loss);
      adam.step(params);
    }
    const double mean = total / static_cast<double>(samples.size());
    losses.push_back(mean);
    if (on_epoch) on_epoch(epoch, mean);
  }
  EvalReport report = test_log.cases.empty() ? EvalReport{} : model.evaluate(test_log);
  return TrainOutcome{std::move(model), std::move(report), std::move(losses)};
}

TrainOutcome train(const EventLog& log, const ModelConfig& config, const EpochCallback& on_epoch) {
  if (log.cases.empty()) throw EmptyLog("cannot train on an empty log");
  config.validate();
  auto [train_log, test_log] = split_train_test(log, config.test_fraction, config.seed);
  return train_on_split(train_log, test_log, config, on_epoch);
}

}  // namespace milecf
