#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "milecf/synthgen.hpp"

using namespace milecf;
namespace sg = milecf::synth;

namespace {

std::ptrdiff_t position(const std::vector<std::string>& acts, const std::string& a) {
  auto it = std::find(acts.begin(), acts.end(), a);
  return it == acts.end() ? -1 : it - acts.begin();
}

}  // namespace

TEST_CASE("degenerate config produces only the happy path") {
  sg::SynthConfig cfg;
  cfg.n_cases = 50;
  cfg.loop_probability = 0.0;
  cfg.decline_probability = 0.0;
  const auto log = sg::generate(cfg);
  const std::vector<std::string> happy = {
      sg::kSubmitted,     sg::kPartlySubmitted, sg::kPreaccepted,   sg::kAccepted,
      sg::kOfferSelected, sg::kFinalised,       sg::kOfferCreated,  sg::kOfferSent,
      sg::kCompleteRequest, sg::kOfferSentBack, sg::kValidateRequest, sg::kRegistered,
      sg::kApproved,      sg::kActivated};
  REQUIRE(log.cases.size() == 50);
  for (const auto& c : log.cases) CHECK(c.activities() == happy);
}

TEST_CASE("generation is deterministic per seed") {
  sg::SynthConfig cfg;
  cfg.n_cases = 100;
  const auto a = sg::generate(cfg);
  const auto b = sg::generate(cfg);
  CHECK(a.cases == b.cases);
  cfg.seed = 43;
  CHECK_FALSE(sg::generate(cfg).cases == a.cases);
}

TEST_CASE("declined fraction follows the configured probability") {
  sg::SynthConfig cfg;
  cfg.n_cases = 1000;
  cfg.decline_probability = 0.3;
  const auto log = sg::generate(cfg);
  std::size_t declined = 0;
  for (const auto& c : log.cases) declined += c.activities().back() == sg::kDeclined;
  const double frac = static_cast<double>(declined) / 1000.0;
  // binomial: sd = sqrt(0.3 * 0.7 / 1000) ~ 0.0145; 0.03 is ~2 sd
  CHECK(std::abs(frac - 0.3) <= 0.03);
}

TEST_CASE("amount adjustment keeps the mean over symmetric amounts") {
  for (double base : {0.0, 0.2, 0.5, 1.0}) {
    double mean = 0.0;
    for (int i = -100; i <= 100; ++i) {
      const double p = sg::amount_adjusted(base, 4.0, i / 100.0);
      CHECK(p >= 0.0);
      CHECK(p <= 1.0);
      mean += p;
    }
    CHECK(mean / 201.0 == doctest::Approx(base).epsilon(1e-12));
  }
  CHECK(sg::amount_adjusted(0.4, 4.0, 1.0) > sg::amount_adjusted(0.4, 4.0, -1.0));
}

TEST_CASE("traces conform to the generator's transition graph and keep milestone order") {
  sg::SynthConfig cfg;
  cfg.n_cases = 500;
  cfg.loop_probability = 0.6;
  cfg.decline_probability = 0.3;
  const auto edges = sg::transitions();
  const std::set<std::pair<std::string, std::string>> allowed(edges.begin(), edges.end());
  for (const auto& c : sg::generate(cfg).cases) {
    const auto acts = c.activities();
    for (std::size_t i = 1; i < acts.size(); ++i) {
      INFO(acts[i - 1] << " -> " << acts[i]);
      CHECK(allowed.count({acts[i - 1], acts[i]}) == 1);
    }
    const auto pre = position(acts, sg::kPreaccepted), acc = position(acts, sg::kAccepted);
    const auto fin = position(acts, sg::kFinalised), app = position(acts, sg::kApproved);
    if (acc >= 0) CHECK(pre >= 0);
    if (acc >= 0) CHECK(pre < acc);
    if (app >= 0) CHECK(fin >= 0);
    if (app >= 0) CHECK(fin < app);
    CHECK(c.amount >= cfg.amount_min);
    CHECK(c.amount <= cfg.amount_max);
    CHECK(std::fmod(c.amount, 250.0) == 0.0);
  }
}

TEST_CASE("config validation and json") {
  sg::SynthConfig cfg;
  cfg.loop_probability = 1.5;
  CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
  sg::SynthConfig d;
  d.n_cases = 7;
  CHECK(sg::SynthConfig::from_json(d.to_json()).to_json() == d.to_json());
}
