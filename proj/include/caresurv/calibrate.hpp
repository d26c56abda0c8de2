#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "caresurv/ensemble.hpp"

namespace caresurv {

inline constexpr int kHorizonPresetsDays[] = {30, 91, 182, 365};

struct HorizonLabels {
  std::vector<int> labels;     // 1 = alive past the horizon, 0 = died by it
  std::vector<bool> included;  // false for rows censored at or before the horizon
  std::size_t excluded = 0;
};

HorizonLabels binarize_at_horizon(OutcomeSpan outcomes, int horizon_days);

/// Survival probability p(s) = 1 / (1 + exp(A s + B)) of a risk score s.
struct PlattScaler {
  double a = 0.0;
  double b = 0.0;
  int horizon_days = 0;
  std::size_t n_train = 0;
  std::size_t n_excluded = 0;
  int iterations = 0;
  bool converged = false;
  std::string diagnostic;

  double predict(double score) const;
  nlohmann::json to_json() const;
  static PlattScaler from_json(const nlohmann::json& j);
};

/// Logistic maximum likelihood by Newton's method (at most 100 iterations).
PlattScaler fit_platt(std::span<const double> risk_scores, std::span<const int> labels, int horizon_days = 0);

/// Platt fit restricted to the rows that binarize_at_horizon includes.
PlattScaler fit_platt_at_horizon(std::span<const double> risk_scores, OutcomeSpan outcomes, int horizon_days);

struct CalibrationCurve {
  std::vector<double> edges;  // n_bins + 1 equal-width edges on [0, 1]
  std::vector<double> mean_predicted;
  std::vector<double> observed_fraction;
  std::vector<std::size_t> counts;
  std::vector<bool> empty;
  std::vector<std::size_t> histogram;  // predictions per bin, labelled or not

  nlohmann::json to_json() const;
  void write_csv(const std::filesystem::path& path) const;
};

CalibrationCurve calibration_curve(std::span<const double> probs, std::span<const int> labels, int n_bins = 10);

struct CalibratedPrediction {
  double probability = 0.0;             // calibrated P(alive at horizon)
  double uncalibrated_survival = 0.0;   // S(horizon | x) from the model
  double risk_score = 0.0;
  int horizon_days = 0;
};

CalibratedPrediction calibrated_predict(const FittedModel& model, const PlattScaler& scaler,
                                        std::span<const double> record, int horizon_days);

/// Refit of label ~ logistic(intercept + slope * logit(p)); a calibrated
/// predictor gives slope 1 and intercept 0.
struct LogisticRecalibration {
  double intercept = 0.0;
  double slope = 0.0;
  bool converged = false;
};

LogisticRecalibration logistic_recalibration(std::span<const double> probs, std::span<const int> labels);

}  // namespace caresurv
