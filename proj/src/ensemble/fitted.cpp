#include <algorithm>
#include <cmath>

#include "caresurv/ensemble.hpp"

namespace caresurv {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

SurvivalCurve from_hazard(std::span<const double> times, double scale, const StepFunction& h0) {
  SurvivalCurve c;
  c.times.assign(times.begin(), times.end());
  for (double t : times) c.survival.push_back(std::exp(-h0(t) * scale));
  return c;
}

}  // namespace

std::string model_kind(const FittedModel& model) {
  return std::visit(Overloaded{[](const CoxModel& m) -> std::string { return m.penalty ? "penalized_cox" : "coxph"; },
                               [](const BoostedCoxModel&) -> std::string { return "boosted_cox"; },
                               [](const SurvivalForestModel&) -> std::string { return "survival_forest"; }},
                    model);
}

const std::vector<std::string>& model_feature_names(const FittedModel& model) {
  return std::visit([](const auto& m) -> const std::vector<std::string>& { return m.feature_names; }, model);
}

double risk_score(const FittedModel& model, std::span<const double> x) {
  return std::visit(Overloaded{[&](const CoxModel& m) { return m.risk_score(x); },
                               [&](const BoostedCoxModel& m) { return predict_margin(m, x); },
                               [&](const SurvivalForestModel& m) { return m.risk_score(x); }},
                    model);
}

SurvivalCurve predict_survival_any(const FittedModel& model, std::span<const double> x, std::span<const double> times) {
  return std::visit(
      Overloaded{[&](const CoxModel& m) { return predict_survival(m, x, times); },
                 [&](const BoostedCoxModel& m) {
                   const double r = std::clamp(predict_margin(m, x), -kScoreClip, kScoreClip);
                   return from_hazard(times, std::exp(r), m.baseline_hazard);
                 },
                 [&](const SurvivalForestModel& m) {
                   SurvivalCurve c;
                   c.times.assign(times.begin(), times.end());
                   for (double t : times) c.survival.push_back(std::exp(-m.cumulative_hazard(x, t)));
                   return c;
                 }},
      model);
}

}  // namespace caresurv
