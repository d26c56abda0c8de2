#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace caresurv {

enum class CensorReason {
  kNone,
  kCurrentResident,
  kTransferFacility,
  kDischargedHome,
  kTransferHospital,
};

std::string_view to_string(CensorReason reason);
// Throws ValidationError on an unknown label.
CensorReason censor_reason_from_string(std::string_view text);

/// Time since admission in whole days with the event indicator
/// (death or hospice transfer). Censored rows keep the discharge reason.
struct SurvivalOutcome {
  int time_days = 1;
  bool event = false;
  CensorReason reason = CensorReason::kCurrentResident;
};

// Throws ValidationError when time_days < 1 or an event carries a censor reason.
void validate(const SurvivalOutcome& outcome);

using Outcomes = std::vector<SurvivalOutcome>;
using OutcomeSpan = std::span<const SurvivalOutcome>;

}  // namespace caresurv
