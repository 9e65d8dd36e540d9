#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "csv.hpp"
#include "milecf/eventlog.hpp"
#include "milecf/random.hpp"

using namespace milecf;

namespace {

const char* kInputQueryCsv =
    "case_id,activity,resource,amount,timestamp\n"
    "173688,A_SUBMITTED,112,15500,2011-10-01T00:38:44.546+02:00\n"
    "173688,A_PARTLYSUBMITTED,112,15500,2011-10-01T00:38:44.880+02:00\n"
    "173688,A_PREACCEPTED,112,15500,2011-10-01T00:39:37.906+02:00\n";

Case make_case(std::string id, std::vector<std::string> acts, double amount = 1000.0) {
  Case c{std::move(id), {}, amount};
  for (std::size_t i = 0; i < acts.size(); ++i) {
    c.events.push_back({acts[i], "r" + std::to_string(i % 3), std::nullopt});
  }
  return c;
}

EventLog make_log(std::vector<Case> cases) {
  EventLog log;
  log.cases = std::move(cases);
  log.vocab = Vocabulary::build(log.cases);
  return log;
}

}  // namespace

TEST_CASE("csv reader handles RFC 4180 quoting") {
  const auto recs = csv::read("a,b,c\r\n\"x,1\",\"he said \"\"hi\"\"\",\"multi\nline\"\n");
  REQUIRE(recs.size() == 2);
  CHECK(recs[1].fields == std::vector<std::string>{"x,1", "he said \"hi\"", "multi\nline"});
  CHECK(recs[1].line == 2);
  CHECK_THROWS_AS(csv::read("a\n\"open"), MalformedRow);
  CHECK(csv::escape("plain") == "plain");
  CHECK(csv::escape("a,b") == "\"a,b\"");
}

TEST_CASE("parse_csv: single loan-application case") {
  const auto log = parse_csv_text(kInputQueryCsv);
  REQUIRE(log.cases.size() == 1);
  CHECK(log.cases[0].amount == 15500.0);
  CHECK(log.cases[0].activities() ==
        std::vector<std::string>{"A_SUBMITTED", "A_PARTLYSUBMITTED", "A_PREACCEPTED"});
  CHECK(log.cases[0].resources() == std::vector<std::string>{"112", "112", "112"});
  CHECK(log.vocab.activities.size() == 3 + 3);
  CHECK(log.vocab.resources.size() == 1 + 3);
}

TEST_CASE("parse_csv: header only yields an empty log with reserved tokens") {
  const auto log = parse_csv_text("case_id,activity,resource,amount\n");
  CHECK(log.cases.empty());
  CHECK(log.vocab.activities.size() == 3);
  CHECK(log.vocab.activities.token_of(TokenMap::kPad) == "<pad>");
  CHECK(log.vocab.activities.token_of(TokenMap::kEos) == "<eos>");
  CHECK(log.vocab.activities.token_of(log.vocab.activities.unk()) == "<unk>");
}

TEST_CASE("parse_csv: interleaved cases match a group-by-then-sort oracle") {
  struct Row {
    std::string id, act, res;
    double ts;
  };
  std::vector<Row> rows;
  Rng rng(11);
  for (int i = 0; i < 40; ++i) {
    rows.push_back({i % 2 ? "B" : "A", "act" + std::to_string(uniform_index(rng, 5)),
                    "res" + std::to_string(uniform_index(rng, 3)),
                    static_cast<double>(uniform_index(rng, 20))});
  }
  std::string text = "case_id,activity,resource,amount,timestamp\n";
  for (const auto& r : rows) {
    text += r.id + "," + r.act + "," + r.res + "," + (r.id == "A" ? "100" : "200") + "," +
            std::to_string(static_cast<int>(r.ts)) + "\n";
  }
  const auto log = parse_csv_text(text);

  std::map<std::string, std::vector<Row>> oracle;
  for (const auto& r : rows) oracle[r.id].push_back(r);
  for (auto& [id, v] : oracle) {
    std::stable_sort(v.begin(), v.end(), [](const Row& a, const Row& b) { return a.ts < b.ts; });
  }
  REQUIRE(log.cases.size() == 2);
  CHECK(log.cases[0].case_id == "A");  // first appearance order
  for (const auto& c : log.cases) {
    const auto& expected = oracle.at(c.case_id);
    REQUIRE(c.events.size() == expected.size());
    for (std::size_t i = 0; i < expected.size(); ++i) {
      CHECK(c.events[i].activity == expected[i].act);
      CHECK(c.events[i].resource == expected[i].res);
      CHECK(*c.events[i].timestamp == expected[i].ts);
    }
  }
}

TEST_CASE("parse_csv: schema mapping and error paths") {
  CsvSchema bpic;
  bpic.case_id = "case:concept:name";
  bpic.activity = "concept:name";
  bpic.resource = "org:resource";
  bpic.amount = "case:AMOUNT_REQ";
  bpic.timestamp = "time:timestamp";
  const auto log = parse_csv_text(
      "case:concept:name,concept:name,org:resource,case:AMOUNT_REQ,time:timestamp\n"
      "1,b,112,5000,2012-01-01 10:00:00\n"
      "1,a,112,5000,2012-01-01 09:00:00\n",
      bpic);
  REQUIRE(log.cases.size() == 1);
  CHECK(log.cases[0].activities() == std::vector<std::string>{"a", "b"});

  CHECK_THROWS_AS(parse_csv_text("case_id,activity,amount\n1,a,3\n"), MissingColumn);
  try {
    parse_csv_text("case_id,activity,resource,amount\n1,a,r,10\n1,b,r\n");
    FAIL("expected MalformedRow");
  } catch (const MalformedRow& e) {
    CHECK(e.row() == 3);
    CHECK(e.code() == "MalformedRow");
  }
  CHECK_THROWS_AS(parse_csv_text("case_id,activity,resource,amount\n1,a,r,-5\n"), NegativeAmount);
  CHECK_THROWS_AS(parse_csv_text("case_id,activity,resource,amount\n1,a,r,abc\n"), MalformedRow);
  CHECK_THROWS_AS(parse_csv_text("case_id,activity,resource,amount\n1,a,r,5\n1,b,r,6\n"),
                  MalformedRow);
}

TEST_CASE("parse_csv reads files and the CSV writer round-trips") {
  const auto path = std::filesystem::temp_directory_path() / "milecf_eventlog_test.csv";
  {
    std::ofstream out(path);
    out << kInputQueryCsv;
  }
  const auto log = parse_csv(path);
  const auto again = parse_csv_text(to_csv(log));
  REQUIRE(again.cases.size() == 1);
  CHECK(again.cases[0].activities() == log.cases[0].activities());
  CHECK(again.cases[0].amount == 15500.0);
  std::filesystem::remove(path);
}

TEST_CASE("parse_timestamp") {
  CHECK(*parse_timestamp("1970-01-02T00:00:00Z") == 86400.0);
  CHECK(*parse_timestamp("1970-01-01T02:00:00+02:00") == 0.0);
  CHECK(*parse_timestamp("42.5") == 42.5);
  CHECK(*parse_timestamp("2011-10-01") == doctest::Approx(1317427200.0));
  CHECK_FALSE(parse_timestamp("yesterday"));
  CHECK_FALSE(parse_timestamp("2011-13-01"));
}

TEST_CASE("vocabulary is a bijection with reserved PAD/EOS/UNK") {
  const auto log = make_log({make_case("1", {"x", "y", "z"}), make_case("2", {"y", "w"})});
  const auto& acts = log.vocab.activities;
  CHECK(acts.size() == 4 + 3);
  for (int i = 0; i < acts.size(); ++i) CHECK(*acts.find(acts.token_of(i)) == i);
  for (const auto& t : acts.data_tokens()) CHECK(acts.token_of(acts.encode(t)) == t);
  CHECK(acts.encode("never-seen") == acts.unk());
  CHECK_THROWS_AS(acts.encode("never-seen", UnkPolicy::kThrow), UnknownToken);
  CHECK_THROWS_AS(acts.token_of(acts.size()), IndexOutOfBounds);
  CHECK_THROWS_AS(TokenMap({"<pad>"}), InvalidArgument);
  CHECK(acts.is_data(2));
  CHECK_FALSE(acts.is_data(TokenMap::kPad));
  CHECK_FALSE(acts.is_data(acts.unk()));
}

TEST_CASE("encode/decode round-trip on random logs") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Case> cases;
    const auto n_cases = 1 + uniform_index(rng, 6);
    for (std::uint64_t c = 0; c < n_cases; ++c) {
      std::vector<std::string> acts;
      const auto len = 1 + uniform_index(rng, 8);
      for (std::uint64_t i = 0; i < len; ++i) acts.push_back("a" + std::to_string(uniform_index(rng, 6)));
      cases.push_back(make_case(std::to_string(c), acts, static_cast<double>(uniform_index(rng, 9000))));
    }
    const auto log = make_log(cases);
    for (const auto& c : log.cases) {
      const auto back = decode(encode(c, log.vocab), log.vocab, c.case_id);
      CHECK(back == c);
    }
  }
}

TEST_CASE("build_prefixes") {
  const AmountStats stats{0.0, 1.0};
  SUBCASE("definition unrolled") {
    const auto log = make_log({make_case("1", {"a", "b", "c"})});
    const auto s = build_prefixes(log, 4, stats);
    const auto& v = log.vocab.activities;
    REQUIRE(s.size() == 3);
    CHECK(s[0].seq_len == 1);
    CHECK(s[0].activity_ids == std::vector<int>{v.encode("a"), 0, 0, 0});
    CHECK(s[0].label == v.encode("b"));
    CHECK(s[1].label == v.encode("c"));
    CHECK(s[2].seq_len == 3);
    CHECK(s[2].label == TokenMap::kEos);
  }
  SUBCASE("single event case") {
    const auto s = build_prefixes(make_log({make_case("1", {"a"})}), 3, stats);
    REQUIRE(s.size() == 1);
    CHECK(s[0].label == TokenMap::kEos);
  }
  SUBCASE("five events padded to T=25") {
    const auto log = make_log({make_case("1", {"A_SUBMITTED", "A_PARTLYSUBMITTED", "A_PREACCEPTED",
                                               "A_ACCEPTED", "O_SELECTED"}, 15500)});
    const auto s = build_prefixes(log, 25, AmountStats{15500.0, 2.0});
    REQUIRE(s.size() == 5);
    const auto& full = s.back();
    CHECK(full.seq_len == 5);
    CHECK(full.amount_norm == 0.0);
    for (int t = 5; t < 25; ++t) {
      CHECK(full.activity_ids[t] == TokenMap::kPad);
      CHECK(full.resource_ids[t] == TokenMap::kPad);
    }
    for (int t = 0; t < 5; ++t) CHECK(full.activity_ids[t] != TokenMap::kPad);
  }
  SUBCASE("long cases keep their most recent events") {
    const auto log = make_log({make_case("1", {"a", "b", "c", "d", "e"})});
    const auto s = build_prefixes(log, 3, stats);
    const auto& v = log.vocab.activities;
    CHECK(s[4].activity_ids == std::vector<int>{v.encode("c"), v.encode("d"), v.encode("e")});
    CHECK(s[4].seq_len == 3);
  }
  SUBCASE("sample count equals event count") {
    Rng rng(5);
    std::vector<Case> cases;
    for (int c = 0; c < 30; ++c) {
      std::vector<std::string> acts(1 + uniform_index(rng, 12), "x");
      cases.push_back(make_case(std::to_string(c), acts));
    }
    const auto log = make_log(cases);
    const auto s = build_prefixes(log, 25, stats);
    CHECK(s.size() == log.event_count());
    for (const auto& p : s) {
      CHECK(p.seq_len >= 1);
      CHECK(p.label != TokenMap::kPad);
    }
  }
  CHECK(build_prefixes(EventLog{}, 5, stats).empty());
  CHECK_THROWS_AS(build_prefixes(EventLog{}, 1, stats), InvalidArgument);
}

TEST_CASE("split_train_test") {
  std::vector<Case> cases;
  for (int i = 0; i < 10; ++i) cases.push_back(make_case("c" + std::to_string(i), {"a", "b"}));
  const auto log = make_log(cases);

  auto [train, test] = split_train_test(log, 0.2, 7);
  CHECK(train.cases.size() == 8);
  CHECK(test.cases.size() == 2);
  std::set<std::string> ids;
  for (const auto& c : train.cases) ids.insert(c.case_id);
  for (const auto& c : test.cases) CHECK(ids.insert(c.case_id).second);

  auto [train2, test2] = split_train_test(log, 0.2, 7);
  CHECK(train2.cases == train.cases);
  CHECK(test2.cases == test.cases);

  std::vector<Case> many;
  for (int i = 0; i < 100; ++i) many.push_back(make_case("k" + std::to_string(i), {"a"}));
  auto [tr, te] = split_train_test(make_log(many), 0.3, 1);
  CHECK(tr.cases.size() == 70);
  CHECK(te.cases.size() == 30);
  std::set<std::string> all;
  for (const auto& c : tr.cases) all.insert(c.case_id);
  for (const auto& c : te.cases) all.insert(c.case_id);
  std::set<std::string> original;
  for (const auto& c : many) original.insert(c.case_id);
  CHECK(all == original);

  CHECK_THROWS_AS(split_train_test(EventLog{}, 0.2, 1), EmptyLog);
  CHECK_THROWS_AS(split_train_test(log, 1.0, 1), InvalidArgument);
}

TEST_CASE("split vocabulary comes from the training part; unseen tokens become UNK") {
  std::vector<Case> cases;
  for (int i = 0; i < 9; ++i) cases.push_back(make_case("c" + std::to_string(i), {"a", "b"}));
  cases.push_back(make_case("rare", {"zzz"}));
  const auto log = make_log(cases);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto [train, test] = split_train_test(log, 0.2, seed);
    CHECK(train.vocab == test.vocab);
    const bool rare_in_test = std::any_of(test.cases.begin(), test.cases.end(),
                                          [](const Case& c) { return c.case_id == "rare"; });
    if (rare_in_test) {
      CHECK_FALSE(train.vocab.activities.find("zzz"));
      const auto& rare = *std::find_if(test.cases.begin(), test.cases.end(),
                                       [](const Case& c) { return c.case_id == "rare"; });
      CHECK(encode(rare, test.vocab).activities[0] == test.vocab.activities.unk());
      return;
    }
  }
  FAIL("no seed put the rare case in the test part");
}

TEST_CASE("json serialisation is stable and lossless") {
  const auto log = parse_csv_text(kInputQueryCsv);
  const auto j = to_json(log);
  const auto back = event_log_from_json(j);
  CHECK(back.cases == log.cases);
  CHECK(back.vocab == log.vocab);
  CHECK(to_json(back).dump() == j.dump());
  CHECK(j.dump().find("\"cases\"") < j.dump().find("\"vocabulary\""));
  CHECK(vocabulary_from_json(to_json(log.vocab)) == log.vocab);
}
