#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "milecf/eventlog.hpp"
#include "milecf/numcore.hpp"

namespace milecf {

using Real = double;
using Graph = num::Graph<Real>;
using Var = num::Var<Real>;
using Param = num::Parameter<Real>;
using Mat = num::Matrix<Real>;

/// Added to logits of classes that may never be predicted (PAD, UNK).
inline constexpr Real kMaskedLogit = -1e30;

struct ModelConfig {
  int activity_embed_dim = 32;
  int resource_embed_dim = 128;
  int lstm_hidden = 64;
  int dense_dim = 64;
  double dropout = 0.1;
  int epochs = 20;
  int batch_size = 128;
  double learning_rate = 0.005;
  std::uint64_t seed = 42;
  std::size_t max_len = 25;
  double test_fraction = 0.2;

  void validate() const;
  json to_json() const;
  /// Missing keys keep their defaults.
  static ModelConfig from_json(const json& j);
  static ModelConfig from_json(const json& j, ModelConfig base);
};

struct EvalReport {
  double accuracy = 0.0;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  std::size_t support = 0;
  /// confusion[true][predicted] over the activity vocabulary.
  std::vector<std::vector<std::size_t>> confusion;

  /// Macro averages run over classes that occur as a label or a prediction.
  static EvalReport from_confusion(std::vector<std::vector<std::size_t>> confusion);
  json to_json() const;
};

struct Prediction {
  int index = 0;
  std::string activity;
  std::vector<Real> probabilities;  // over the activity vocabulary
};

/// Next-activity classifier: activity and resource embeddings feed a
/// single-layer LSTM; the normalised amount feeds a tanh dense layer; both
/// are concatenated into a linear head over the activity vocabulary.
class NextActivityModel {
 public:
  NextActivityModel(Vocabulary vocab, AmountStats stats, ModelConfig config);

  const Vocabulary& vocab() const { return vocab_; }
  const AmountStats& amount_stats() const { return stats_; }
  const ModelConfig& config() const { return config_; }
  int num_activities() const { return vocab_.activities.size(); }
  int num_resources() const { return vocab_.resources.size(); }

  std::vector<Param*> parameters();
  std::vector<const Param*> parameters() const;
  std::size_t parameter_count() const;
  void zero_parameters();

  /// Batched logits, shape [batch, |A|]. `trainable` binds the weights so
  /// backward() reaches them; dropout is active only when `rng` is given.
  Var forward(Graph& g, std::span<const PrefixSample> batch, bool trainable, Rng* rng);

  /// Inference-only batched logits.
  Mat logits(std::span<const PrefixSample> batch) const;

  /// Logits for one relaxed sequence: `activity_probs` is L x |A|,
  /// `resource_probs` is L x |R| and `amount_norm` is 1 x 1. Rows are mixed
  /// into the embedding tables, so one-hot rows reproduce forward() exactly.
  Var forward_relaxed(Graph& g, const Var& activity_probs, const Var& resource_probs,
                      const Var& amount_norm) const;

  /// Argmax over the masked softmax; ties go to the lowest index.
  Prediction predict(std::span<const int> activities, std::span<const int> resources,
                     double amount) const;
  Prediction predict_next(const std::vector<std::pair<std::string, std::string>>& prefix,
                          double amount, UnkPolicy policy = UnkPolicy::kMapToUnk) const;

  EvalReport evaluate(const EventLog& log) const;

  json to_json() const;
  static NextActivityModel from_json(const json& j);
  void save(const std::filesystem::path& path) const;
  static NextActivityModel load(const std::filesystem::path& path);

  static constexpr const char* kCheckpointVersion = "milecf-checkpoint/1";

 private:
  template <typename Bind>
  Var run_batch(Graph& g, std::span<const PrefixSample> batch, Bind bind, Rng* rng) const;
  template <typename Bind>
  Var head(Graph& g, const Var& hidden, const Var& amount, Bind bind, Rng* rng) const;
  Mat logit_mask() const;

  Vocabulary vocab_;
  AmountStats stats_;
  ModelConfig config_;

  Param activity_embedding_;
  Param resource_embedding_;
  Param lstm_input_;      // (Ea + Er) x 4H, gate order i f g o
  Param lstm_recurrent_;  // H x 4H
  Param lstm_bias_;       // 1 x 4H
  Param amount_weight_;   // 1 x D
  Param amount_bias_;     // 1 x D
  Param head_weight_;     // (H + D) x |A|
  Param head_bias_;       // 1 x |A|
};

struct TrainOutcome {
  NextActivityModel model;
  EvalReport report;  // on the held-out split
  std::vector<double> epoch_losses;
};

using EpochCallback = std::function<void(int epoch, double mean_loss)>;

/// Splits `log` by case (config.test_fraction, config.seed), fits on the
/// training part, and evaluates on the held-out part.
TrainOutcome train(const EventLog& log, const ModelConfig& config, const EpochCallback& on_epoch = {});

/// Fits on an already split log. `train_log.vocab` defines the model vocabulary.
TrainOutcome train_on_split(const EventLog& train_log, const EventLog& test_log,
                            const ModelConfig& config, const EpochCallback& on_epoch = {});

}  // namespace milecf
