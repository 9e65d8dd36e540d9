#include "milecf/eventlog.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "csv.hpp"
#include "milecf/random.hpp"

namespace milecf {

std::vector<std::string> Case::activities() const {
  std::vector<std::string> out;
  out.reserve(events.size());
  for (const auto& e : events) out.push_back(e.activity);
  return out;
}

std::vector<std::string> Case::resources() const {
  std::vector<std::string> out;
  out.reserve(events.size());
  for (const auto& e : events) out.push_back(e.resource);
  return out;
}

// ---------------------------------------------------------------------------
// TokenMap / Vocabulary

TokenMap::TokenMap() : TokenMap(std::vector<std::string>{}) {}

TokenMap::TokenMap(std::vector<std::string> data_tokens) {
  std::sort(data_tokens.begin(), data_tokens.end());
  data_tokens.erase(std::unique(data_tokens.begin(), data_tokens.end()), data_tokens.end());
  tokens_.reserve(data_tokens.size() + 3);
  tokens_.emplace_back(kPadToken);
  tokens_.emplace_back(kEosToken);
  for (auto& t : data_tokens) {
    if (t.empty()) throw InvalidArgument("empty token");
    if (t == kPadToken || t == kEosToken || t == kUnkToken) {
      throw InvalidArgument("data token collides with reserved token '" + t + "'");
    }
    tokens_.push_back(std::move(t));
  }
  tokens_.emplace_back(kUnkToken);
  for (int i = 0; i < size(); ++i) index_.emplace(tokens_[i], i);
}

std::optional<int> TokenMap::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

int TokenMap::encode(std::string_view token, UnkPolicy policy) const {
  if (auto idx = find(token); idx && is_data(*idx)) return *idx;
  if (policy == UnkPolicy::kThrow) {
    throw UnknownToken("unknown token '" + std::string(token) + "'");
  }
  return unk();
}

const std::string& TokenMap::token_of(int index) const {
  if (index < 0 || index >= size()) {
    throw IndexOutOfBounds("token index " + std::to_string(index) + " outside [0, " +
                           std::to_string(size()) + ")");
  }
  return tokens_[index];
}

std::vector<std::string> TokenMap::data_tokens() const {
  return {tokens_.begin() + 2, tokens_.end() - 1};
}

Vocabulary Vocabulary::build(const std::vector<Case>& cases) {
  std::set<std::string> acts, res;
  for (const auto& c : cases) {
    for (const auto& e : c.events) {
      acts.insert(e.activity);
      res.insert(e.resource);
    }
  }
  return Vocabulary{TokenMap({acts.begin(), acts.end()}), TokenMap({res.begin(), res.end()})};
}

std::size_t EventLog::event_count() const {
  std::size_t n = 0;
  for (const auto& c : cases) n += c.events.size();
  return n;
}

AmountStats AmountStats::from_cases(const std::vector<Case>& cases) {
  AmountStats s;
  if (cases.empty()) return s;
  double sum = 0.0;
  for (const auto& c : cases) sum += c.amount;
  s.mean = sum / static_cast<double>(cases.size());
  double ss = 0.0;
  for (const auto& c : cases) ss += (c.amount - s.mean) * (c.amount - s.mean);
  s.std = std::sqrt(ss / static_cast<double>(cases.size()));
  if (!(s.std > 0.0)) s.std = 1.0;
  return s;
}

// ---------------------------------------------------------------------------
// Encoding

EncodedTrace encode(const Case& c, const Vocabulary& vocab, UnkPolicy policy) {
  EncodedTrace t;
  t.amount = c.amount;
  t.activities.reserve(c.events.size());
  t.resources.reserve(c.events.size());
  for (const auto& e : c.events) {
    t.activities.push_back(vocab.activities.encode(e.activity, policy));
    t.resources.push_back(vocab.resources.encode(e.resource, policy));
  }
  return t;
}

Case decode(const EncodedTrace& trace, const Vocabulary& vocab, std::string case_id) {
  Case c;
  c.case_id = std::move(case_id);
  c.amount = trace.amount;
  const std::size_t n = std::min(trace.activities.size(), trace.resources.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (trace.activities[i] == TokenMap::kPad) break;
    c.events.push_back({vocab.activities.token_of(trace.activities[i]),
                        vocab.resources.token_of(trace.resources[i]), std::nullopt});
  }
  return c;
}

PrefixSample encode_prefix(std::span<const int> activities, std::span<const int> resources,
                           double amount_norm, std::size_t max_len, int label) {
  if (activities.size() != resources.size()) {
    throw ShapeMismatch("activity and resource prefixes differ in length");
  }
  if (activities.empty()) throw InvalidArgument("prefix is empty");
  if (max_len < 1) throw InvalidArgument("max_len must be positive");
  PrefixSample s;
  const std::size_t n = std::min(activities.size(), max_len);
  const std::size_t offset = activities.size() - n;
  s.activity_ids.assign(max_len, TokenMap::kPad);
  s.resource_ids.assign(max_len, TokenMap::kPad);
  std::copy_n(activities.begin() + offset, n, s.activity_ids.begin());
  std::copy_n(resources.begin() + offset, n, s.resource_ids.begin());
  s.seq_len = static_cast<int>(n);
  s.amount_norm = amount_norm;
  s.label = label;
  return s;
}

std::vector<PrefixSample> build_prefixes(const EventLog& log, std::size_t max_len,
                                         const AmountStats& stats) {
  if (max_len < 2) throw InvalidArgument("max_len must be at least 2");
  std::vector<PrefixSample> out;
  out.reserve(log.event_count());
  for (const auto& c : log.cases) {
    const auto enc = encode(c, log.vocab);
    const double z = stats.normalize(c.amount);
    const std::span<const int> acts(enc.activities), res(enc.resources);
    for (std::size_t n = 1; n <= acts.size(); ++n) {
      const int label = n < acts.size() ? acts[n] : TokenMap::kEos;
      out.push_back(encode_prefix(acts.first(n), res.first(n), z, max_len, label));
    }
  }
  return out;
}

std::pair<EventLog, EventLog> split_train_test(const EventLog& log, double test_fraction,
                                               std::uint64_t seed) {
  if (log.cases.empty()) throw EmptyLog("cannot split an empty log");
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw InvalidArgument("test_fraction must lie in (0, 1)");
  }
  const std::size_t n = log.cases.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  shuffle(std::span(order), rng);

  std::size_t n_test = static_cast<std::size_t>(std::llround(test_fraction * n));
  n_test = std::min(n_test, n - 1);
  std::vector<std::size_t> test_idx(order.begin(), order.begin() + n_test);
  std::vector<std::size_t> train_idx(order.begin() + n_test, order.end());
  // keep file order inside each part
  std::sort(test_idx.begin(), test_idx.end());
  std::sort(train_idx.begin(), train_idx.end());

  EventLog train, test;
  for (auto i : train_idx) train.cases.push_back(log.cases[i]);
  for (auto i : test_idx) test.cases.push_back(log.cases[i]);
  train.vocab = Vocabulary::build(train.cases);
  test.vocab = train.vocab;
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// CSV

CsvSchema CsvSchema::from_json(const json& j) {
  CsvSchema s;
  s.case_id = j.value("case_id", s.case_id);
  s.activity = j.value("activity", s.activity);
  s.resource = j.value("resource", s.resource);
  s.amount = j.value("amount", s.amount);
  s.timestamp = j.value("timestamp", s.timestamp);
  return s;
}

namespace {

std::optional<double> parse_number(std::string_view text) {
  while (!text.empty() && text.front() == ' ') text.remove_prefix(1);
  while (!text.empty() && text.back() == ' ') text.remove_suffix(1);
  if (text.starts_with('+')) text.remove_prefix(1);
  double value = 0.0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc{} || ptr != text.data() + text.size() || text.empty()) return std::nullopt;
  return value;
}

bool read_int(std::string_view text, std::size_t& pos, std::size_t digits, int& out) {
  if (pos + digits > text.size()) return false;
  auto [ptr, ec] = std::from_chars(text.data() + pos, text.data() + pos + digits, out);
  if (ec != std::errc{} || ptr != text.data() + pos + digits) return false;
  pos += digits;
  return true;
}

}  // namespace

std::optional<double> parse_timestamp(std::string_view text) {
  if (text.empty()) return std::nullopt;
  if (auto number = parse_number(text)) return number;

  using namespace std::chrono;
  std::size_t pos = 0;
  int y, mo, d, h = 0, mi = 0, s = 0;
  auto expect = [&](char c) {
    if (pos < text.size() && text[pos] == c) {
      ++pos;
      return true;
    }
    return false;
  };
  if (!read_int(text, pos, 4, y) || !expect('-') || !read_int(text, pos, 2, mo) || !expect('-') ||
      !read_int(text, pos, 2, d)) {
    return std::nullopt;
  }
  double frac = 0.0;
  double offset = 0.0;
  if (pos < text.size() && (text[pos] == 'T' || text[pos] == ' ')) {
    ++pos;
    if (!read_int(text, pos, 2, h) || !expect(':') || !read_int(text, pos, 2, mi)) {
      return std::nullopt;
    }
    if (expect(':') && !read_int(text, pos, 2, s)) return std::nullopt;
    if (expect('.')) {
      double scale = 0.1;
      while (pos < text.size() && std::isdigit(static_cast<unsigned char>(text[pos]))) {
        frac += scale * (text[pos] - '0');
        scale /= 10.0;
        ++pos;
      }
    }
    if (expect('Z')) {
    } else if (pos < text.size() && (text[pos] == '+' || text[pos] == '-')) {
      const double sign = text[pos] == '-' ? -1.0 : 1.0;
      ++pos;
      int oh, om = 0;
      if (!read_int(text, pos, 2, oh)) return std::nullopt;
      expect(':');
      if (pos < text.size() && !read_int(text, pos, 2, om)) return std::nullopt;
      offset = sign * (oh * 3600.0 + om * 60.0);
    }
  }
  if (pos != text.size()) return std::nullopt;
  const year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)}, day{static_cast<unsigned>(d)}};
  if (!ymd.ok() || h > 23 || mi > 59 || s > 60) return std::nullopt;
  const auto days = sys_days(ymd).time_since_epoch().count();
  return static_cast<double>(days) * 86400.0 + h * 3600.0 + mi * 60.0 + s + frac - offset;
}

EventLog parse_csv_text(std::string_view text, const CsvSchema& schema) {
  const auto records = csv::read(text);
  if (records.empty()) throw MissingColumn("CSV has no header row");

  const auto& header = records.front().fields;
  auto column = [&](const std::string& name) -> std::optional<std::size_t> {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) return std::nullopt;
    return static_cast<std::size_t>(it - header.begin());
  };
  auto required = [&](const std::string& name) {
    auto idx = column(name);
    if (!idx) throw MissingColumn("missing column '" + name + "'");
    return *idx;
  };
  const std::size_t c_case = required(schema.case_id);
  const std::size_t c_act = required(schema.activity);
  const std::size_t c_res = required(schema.resource);
  const std::size_t c_amt = required(schema.amount);
  const auto c_ts = schema.timestamp.empty() ? std::nullopt : column(schema.timestamp);

  EventLog log;
  std::unordered_map<std::string, std::size_t> case_index;
  for (std::size_t r = 1; r < records.size(); ++r) {
    const auto& rec = records[r];
    const auto& f = rec.fields;
    if (f.size() != header.size()) {
      throw MalformedRow(rec.line, "expected " + std::to_string(header.size()) + " fields, got " +
                                       std::to_string(f.size()));
    }
    if (f[c_case].empty()) throw MalformedRow(rec.line, "empty case id");
    if (f[c_act].empty()) throw MalformedRow(rec.line, "empty activity");
    if (f[c_res].empty()) throw MalformedRow(rec.line, "empty resource");
    const auto amount = parse_number(f[c_amt]);
    if (!amount || !std::isfinite(*amount)) {
      throw MalformedRow(rec.line, "amount '" + f[c_amt] + "' is not a number");
    }
    if (*amount < 0.0) {
      throw NegativeAmount("row " + std::to_string(rec.line) + ": negative amount " + f[c_amt]);
    }
    Event ev{f[c_act], f[c_res], std::nullopt};
    if (c_ts && !f[*c_ts].empty()) {
      ev.timestamp = parse_timestamp(f[*c_ts]);
      if (!ev.timestamp) throw MalformedRow(rec.line, "unparseable timestamp '" + f[*c_ts] + "'");
    }

    auto [it, inserted] = case_index.try_emplace(f[c_case], log.cases.size());
    if (inserted) log.cases.push_back(Case{f[c_case], {}, *amount});
    Case& c = log.cases[it->second];
    if (c.amount != *amount) {
      throw MalformedRow(rec.line, "amount differs from earlier rows of case '" + c.case_id + "'");
    }
    c.events.push_back(std::move(ev));
  }

  for (auto& c : log.cases) {
    const bool timed = std::all_of(c.events.begin(), c.events.end(),
                                   [](const Event& e) { return e.timestamp.has_value(); });
    if (timed) {
      std::stable_sort(c.events.begin(), c.events.end(),
                       [](const Event& a, const Event& b) { return *a.timestamp < *b.timestamp; });
    }
  }
  log.vocab = Vocabulary::build(log.cases);
  return log;
}

EventLog parse_csv(const std::filesystem::path& path, const CsvSchema& schema) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidArgument("cannot open '" + path.string() + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_csv_text(buffer.str(), schema);
}

namespace {

std::string format_number(double x) {
  if (x == std::floor(x) && std::abs(x) < 1e15) {
    return std::to_string(static_cast<long long>(x));
  }
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, ptr);
}

}  // namespace

std::string to_csv(const EventLog& log) {
  std::string out = "case_id,activity,resource,amount,timestamp\n";
  for (const auto& c : log.cases) {
    for (const auto& e : c.events) {
      out += csv::escape(c.case_id) + ',' + csv::escape(e.activity) + ',' +
             csv::escape(e.resource) + ',' + format_number(c.amount) + ',' +
             (e.timestamp ? format_number(*e.timestamp) : std::string()) + '\n';
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON

json to_json(const TokenMap& map) {
  json arr = json::array();
  for (int i = 0; i < map.size(); ++i) arr.push_back(map.token_of(i));
  return arr;
}

json to_json(const Vocabulary& vocab) {
  return json{{"activities", to_json(vocab.activities)}, {"resources", to_json(vocab.resources)}};
}

json to_json(const EventLog& log) {
  json cases = json::array();
  for (const auto& c : log.cases) {
    json events = json::array();
    for (const auto& e : c.events) {
      json ev{{"activity", e.activity}, {"resource", e.resource}};
      if (e.timestamp) ev["timestamp"] = *e.timestamp;
      events.push_back(std::move(ev));
    }
    cases.push_back(json{{"case_id", c.case_id}, {"amount", c.amount}, {"events", std::move(events)}});
  }
  return json{{"cases", std::move(cases)}, {"vocabulary", to_json(log.vocab)}};
}

TokenMap token_map_from_json(const json& j) {
  if (!j.is_array() || j.size() < 3) throw InvalidArgument("token map must be an array of >= 3 tokens");
  const auto tokens = j.get<std::vector<std::string>>();
  if (tokens.front() != TokenMap::kPadToken || tokens[1] != TokenMap::kEosToken ||
      tokens.back() != TokenMap::kUnkToken) {
    throw InvalidArgument("token map lacks reserved PAD/EOS/UNK entries");
  }
  TokenMap map({tokens.begin() + 2, tokens.end() - 1});
  if (to_json(map) != j) throw InvalidArgument("token map is not sorted and unique");
  return map;
}

Vocabulary vocabulary_from_json(const json& j) {
  return Vocabulary{token_map_from_json(j.at("activities")), token_map_from_json(j.at("resources"))};
}

EventLog event_log_from_json(const json& j) {
  EventLog log;
  std::set<std::string> seen;
  for (const auto& jc : j.at("cases")) {
    Case c;
    c.case_id = jc.at("case_id").get<std::string>();
    c.amount = jc.at("amount").get<double>();
    if (c.amount < 0.0) throw NegativeAmount("case '" + c.case_id + "' has a negative amount");
    if (!seen.insert(c.case_id).second) {
      throw InvalidArgument("duplicate case id '" + c.case_id + "'");
    }
    for (const auto& je : jc.at("events")) {
      Event e{je.at("activity").get<std::string>(), je.at("resource").get<std::string>(), std::nullopt};
      if (je.contains("timestamp")) e.timestamp = je.at("timestamp").get<double>();
      c.events.push_back(std::move(e));
    }
    if (c.events.empty()) throw InvalidArgument("case '" + c.case_id + "' has no events");
    log.cases.push_back(std::move(c));
  }
  log.vocab = j.contains("vocabulary") ? vocabulary_from_json(j.at("vocabulary"))
                                       : Vocabulary::build(log.cases);
  return log;
}

}  // namespace milecf
