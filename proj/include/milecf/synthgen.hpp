#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "milecf/eventlog.hpp"

namespace milecf::synth {

// Activity labels of the loan-application skeleton.
inline constexpr const char* kSubmitted = "A_SUBMITTED";
inline constexpr const char* kPartlySubmitted = "A_PARTLYSUBMITTED";
inline constexpr const char* kPreaccepted = "A_PREACCEPTED";
inline constexpr const char* kDeclined = "A_DECLINED";
inline constexpr const char* kCompleteRequest = "W_Complete request";
inline constexpr const char* kHandlingLeads = "W_Handling leads";
inline constexpr const char* kAccepted = "A_ACCEPTED";
inline constexpr const char* kOfferSelected = "O_SELECTED";
inline constexpr const char* kFinalised = "A_FINALISED";
inline constexpr const char* kOfferCreated = "O_CREATED";
inline constexpr const char* kOfferSent = "O_SENT";
inline constexpr const char* kOfferSentBack = "O_SENT_BACK";
inline constexpr const char* kValidateRequest = "W_Validate request";
inline constexpr const char* kRegistered = "A_REGISTERED";
inline constexpr const char* kApproved = "A_APPROVED";
inline constexpr const char* kActivated = "A_ACTIVATED";

struct SynthConfig {
  std::size_t n_cases = 1000;
  std::uint64_t seed = 42;
  /// Chance of (another) rework step right after pre-acceptance.
  double loop_probability = 0.4;
  /// Overall fraction of declined applications.
  double decline_probability = 0.2;
  double amount_min = 1000.0;
  double amount_max = 50000.0;
  double amount_step = 250.0;
  std::size_t resource_pool_size = 12;
  /// Slope of the logistic amount effect; 0 disables it.
  double amount_slope = 4.0;
  std::size_t max_loops = 6;

  void validate() const;
  static SynthConfig from_json(const json& j);
  json to_json() const;
};

/// Probability after shifting `base` by the logistic amount effect. The shift
/// is odd in `z`, so for amounts symmetric around the range centre the mean
/// probability stays `base`.
double amount_adjusted(double base, double slope, double z);

/// Directly-follows relation the generator can produce.
std::vector<std::pair<std::string, std::string>> transitions();

EventLog generate(const SynthConfig& config);

}  // namespace milecf::synth
