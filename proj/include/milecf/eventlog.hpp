#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "milecf/error.hpp"

namespace milecf {

using json = nlohmann::json;

struct Event {
  std::string activity;
  std::string resource;
  std::optional<double> timestamp;  // seconds; ordering only

  bool operator==(const Event&) const = default;
};

struct Case {
  std::string case_id;
  std::vector<Event> events;
  double amount = 0.0;

  std::vector<std::string> activities() const;
  std::vector<std::string> resources() const;

  bool operator==(const Case&) const = default;
};

/// What to do with a token the map has never seen.
enum class UnkPolicy { kMapToUnk, kThrow };

/// Bijective token <-> index map. Index 0 is PAD and 1 is EOS; data tokens
/// follow in sorted order and the UNK index is appended last.
class TokenMap {
 public:
  static constexpr int kPad = 0;
  static constexpr int kEos = 1;
  static constexpr std::string_view kPadToken = "<pad>";
  static constexpr std::string_view kEosToken = "<eos>";
  static constexpr std::string_view kUnkToken = "<unk>";

  TokenMap();
  explicit TokenMap(std::vector<std::string> data_tokens);

  int size() const { return static_cast<int>(tokens_.size()); }
  int unk() const { return size() - 1; }
  /// True for indices that denote a real token (not PAD, EOS, UNK).
  bool is_data(int index) const { return index > kEos && index < unk(); }

  std::optional<int> find(std::string_view token) const;
  int encode(std::string_view token, UnkPolicy policy = UnkPolicy::kMapToUnk) const;
  const std::string& token_of(int index) const;

  /// Data tokens only, in index order.
  std::vector<std::string> data_tokens() const;

  bool operator==(const TokenMap& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

struct Vocabulary {
  TokenMap activities;
  TokenMap resources;

  static Vocabulary build(const std::vector<Case>& cases);

  bool operator==(const Vocabulary&) const = default;
};

struct EventLog {
  std::vector<Case> cases;
  Vocabulary vocab;

  std::size_t event_count() const;
};

/// z-score parameters for the static amount feature.
struct AmountStats {
  double mean = 0.0;
  double std = 1.0;

  static AmountStats from_cases(const std::vector<Case>& cases);
  double normalize(double amount) const { return (amount - mean) / std; }
  double denormalize(double z) const { return z * std + mean; }
};

/// A case as index sequences over a vocabulary.
struct EncodedTrace {
  std::vector<int> activities;
  std::vector<int> resources;
  double amount = 0.0;
};

EncodedTrace encode(const Case& c, const Vocabulary& vocab,
                    UnkPolicy policy = UnkPolicy::kMapToUnk);
Case decode(const EncodedTrace& trace, const Vocabulary& vocab, std::string case_id = {});

struct PrefixSample {
  std::vector<int> activity_ids;  // length T, right-padded with PAD
  std::vector<int> resource_ids;
  int seq_len = 0;
  double amount_norm = 0.0;
  int label = TokenMap::kEos;
};

/// Encodes one running prefix. Longer prefixes keep their last `max_len` events.
PrefixSample encode_prefix(std::span<const int> activities, std::span<const int> resources,
                           double amount_norm, std::size_t max_len, int label = TokenMap::kEos);

/// Every case of n events yields n samples: prefixes 1..n-1 labelled with the
/// following activity, plus the full case labelled EOS.
std::vector<PrefixSample> build_prefixes(const EventLog& log, std::size_t max_len,
                                         const AmountStats& stats);

/// Case-granular random split. The returned logs share a vocabulary built
/// from the training part; unseen test tokens are encoded as UNK.
std::pair<EventLog, EventLog> split_train_test(const EventLog& log, double test_fraction,
                                               std::uint64_t seed);

struct CsvSchema {
  std::string case_id = "case_id";
  std::string activity = "activity";
  std::string resource = "resource";
  std::string amount = "amount";
  std::string timestamp = "timestamp";  // optional column

  static CsvSchema from_json(const json& j);
};

EventLog parse_csv(const std::filesystem::path& path, const CsvSchema& schema = {});
EventLog parse_csv_text(std::string_view text, const CsvSchema& schema = {});

/// Writes the canonical CSV layout (case_id, activity, resource, amount, timestamp).
std::string to_csv(const EventLog& log);

/// Parses an ISO-8601 instant ("2011-10-01T00:38:44.546+02:00") or a plain
/// number into seconds since the epoch.
std::optional<double> parse_timestamp(std::string_view text);

json to_json(const TokenMap& map);
json to_json(const Vocabulary& vocab);
json to_json(const EventLog& log);
TokenMap token_map_from_json(const json& j);
Vocabulary vocabulary_from_json(const json& j);
EventLog event_log_from_json(const json& j);

}  // namespace milecf
