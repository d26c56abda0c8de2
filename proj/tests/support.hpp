#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "caresurv/outcome.hpp"

namespace testing {

inline caresurv::SurvivalOutcome death(int t) { return {t, true, caresurv::CensorReason::kNone}; }
inline caresurv::SurvivalOutcome censor(int t) { return {t, false, caresurv::CensorReason::kCurrentResident}; }

// Proportional-hazards draws with exponential baseline (rate `base`) and
// independent exponential censoring; times rounded up to whole days.
inline caresurv::Outcomes exponential_outcomes(const std::vector<double>& eta, double base, double censor_rate,
                                               std::mt19937_64& rng) {
  std::exponential_distribution<double> e(1.0);
  caresurv::Outcomes out;
  for (double h : eta) {
    const double t = e(rng) / (base * std::exp(h));
    const double c = censor_rate > 0 ? e(rng) / censor_rate : INFINITY;
    const double obs = std::min(t, c);
    out.push_back(t <= c ? death(static_cast<int>(std::ceil(obs))) : censor(static_cast<int>(std::ceil(obs))));
  }
  return out;
}

}  // namespace testing
