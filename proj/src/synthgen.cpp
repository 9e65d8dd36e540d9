#include "milecf/synthgen.hpp"

#include <cmath>

#include "milecf/random.hpp"

namespace milecf::synth {

void SynthConfig::validate() const {
  auto prob = [](double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) throw InvalidArgument(std::string(name) + " must lie in [0, 1]");
  };
  prob(loop_probability, "loop_probability");
  prob(decline_probability, "decline_probability");
  if (n_cases < 1) throw InvalidArgument("n_cases must be at least 1");
  if (!(amount_min >= 0.0 && amount_max >= amount_min)) throw InvalidArgument("bad amount range");
  if (!(amount_step > 0.0)) throw InvalidArgument("amount_step must be positive");
  if (resource_pool_size < 1) throw InvalidArgument("resource_pool_size must be at least 1");
}

SynthConfig SynthConfig::from_json(const json& j) {
  SynthConfig c;
  if (!j.is_object()) throw InvalidArgument("synth config must be an object");
  try {
    c.n_cases = j.value("n_cases", c.n_cases);
    c.seed = j.value("seed", c.seed);
    c.loop_probability = j.value("loop_probability", c.loop_probability);
    c.decline_probability = j.value("decline_probability", c.decline_probability);
    c.amount_min = j.value("amount_min", c.amount_min);
    c.amount_max = j.value("amount_max", c.amount_max);
    c.amount_step = j.value("amount_step", c.amount_step);
    c.resource_pool_size = j.value("resource_pool_size", c.resource_pool_size);
    c.amount_slope = j.value("amount_slope", c.amount_slope);
    c.max_loops = j.value("max_loops", c.max_loops);
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("synth config: ") + e.what());
  }
  c.validate();
  return c;
}

json SynthConfig::to_json() const {
  return json{{"n_cases", n_cases},
              {"seed", seed},
              {"loop_probability", loop_probability},
              {"decline_probability", decline_probability},
              {"amount_min", amount_min},
              {"amount_max", amount_max},
              {"amount_step", amount_step},
              {"resource_pool_size", resource_pool_size},
              {"amount_slope", amount_slope},
              {"max_loops", max_loops}};
}

double amount_adjusted(double base, double slope, double z) {
  const double logistic = 1.0 / (1.0 + std::exp(-slope * z));
  return base + base * (1.0 - base) * (2.0 * logistic - 1.0);
}

std::vector<std::pair<std::string, std::string>> transitions() {
  return {
      {kSubmitted, kPartlySubmitted},     {kPartlySubmitted, kPreaccepted},
      {kPartlySubmitted, kDeclined},      {kPreaccepted, kCompleteRequest},
      {kPreaccepted, kHandlingLeads},     {kPreaccepted, kAccepted},
      {kCompleteRequest, kCompleteRequest}, {kCompleteRequest, kHandlingLeads},
      {kHandlingLeads, kCompleteRequest}, {kHandlingLeads, kHandlingLeads},
      {kCompleteRequest, kAccepted},      {kHandlingLeads, kAccepted},
      {kAccepted, kOfferSelected},        {kOfferSelected, kFinalised},
      {kFinalised, kOfferCreated},        {kOfferCreated, kOfferSent},
      {kOfferSent, kCompleteRequest},     {kCompleteRequest, kOfferSentBack},
      {kOfferSentBack, kValidateRequest}, {kValidateRequest, kRegistered},
      {kValidateRequest, kDeclined},      {kRegistered, kApproved},
      {kApproved, kActivated},
  };
}

EventLog generate(const SynthConfig& config) {
  config.validate();
  Rng rng(config.seed);

  std::vector<std::string> pool;
  for (std::size_t i = 0; i < config.resource_pool_size; ++i) pool.push_back(std::to_string(10900 + i));

  // Two independent decline points whose survival product is 1 - p; only the
  // late one depends on the amount.
  const double per_point = 1.0 - std::sqrt(1.0 - config.decline_probability);
  const auto grid = static_cast<std::uint64_t>(
      std::floor((config.amount_max - config.amount_min) / config.amount_step + 1e-9));
  const double centre = config.amount_min + 0.5 * grid * config.amount_step;
  const double half = std::max(0.5 * grid * config.amount_step, 1e-12);

  EventLog log;
  log.cases.reserve(config.n_cases);
  for (std::size_t n = 0; n < config.n_cases; ++n) {
    Case c;
    c.case_id = std::to_string(200000 + n);
    c.amount = config.amount_min + config.amount_step * static_cast<double>(uniform_index(rng, grid + 1));
    const double z = (c.amount - centre) / half;

    std::string officer = pool[uniform_index(rng, pool.size())];
    double clock = 0.0;
    auto emit = [&](const char* activity, const std::string& resource) {
      c.events.push_back({activity, resource, clock});
      clock += 1.0;
    };
    auto staff = [&]() -> const std::string& {
      if (uniform01(rng) < 0.3) officer = pool[uniform_index(rng, pool.size())];
      return officer;
    };

    emit(kSubmitted, "112");
    emit(kPartlySubmitted, "112");
    if (uniform01(rng) < per_point) {
      emit(kDeclined, "112");
      log.cases.push_back(std::move(c));
      continue;
    }
    emit(kPreaccepted, "112");

    const double loop_p = amount_adjusted(config.loop_probability, config.amount_slope, z);
    for (std::size_t k = 0; k < config.max_loops && uniform01(rng) < loop_p; ++k) {
      emit(uniform01(rng) < 0.8 ? kCompleteRequest : kHandlingLeads, staff());
    }

    emit(kAccepted, staff());
    emit(kOfferSelected, officer);
    emit(kFinalised, officer);
    emit(kOfferCreated, officer);
    emit(kOfferSent, officer);
    emit(kCompleteRequest, staff());
    emit(kOfferSentBack, officer);
    emit(kValidateRequest, staff());

    const double late_p = amount_adjusted(per_point, config.amount_slope, z);
    if (uniform01(rng) < late_p) {
      emit(kDeclined, officer);
    } else {
      emit(kRegistered, officer);
      emit(kApproved, officer);
      emit(kActivated, officer);
    }
    log.cases.push_back(std::move(c));
  }
  log.vocab = Vocabulary::build(log.cases);
  return log;
}

}  // namespace milecf::synth
