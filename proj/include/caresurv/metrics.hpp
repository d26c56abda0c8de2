#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "caresurv/survcore.hpp"

namespace caresurv {

/// Harrell's concordance: over pairs where i died at t_i and t_j > t_i,
/// score_i > score_j counts 1 and ties 0.5. nullopt when no pair is comparable.
std::optional<double> harrell_cindex(std::span<const double> scores, OutcomeSpan outcomes);

/// Uno-style concordance truncated at tau (events with t_i < tau), each pair
/// weighted by G(t_i-)^-2 where G is the censoring Kaplan-Meier of the
/// training outcomes. Throws ValidationError if G(t_i-) = 0 for a needed t_i.
std::optional<double> ipcw_cindex(OutcomeSpan train_outcomes, std::span<const double> test_scores,
                                  OutcomeSpan test_outcomes, double tau);

/// Cumulative/dynamic AUC at t: cases are events with time <= t weighted by
/// 1/G(t_i-), controls are rows with time > t.
std::optional<double> dynamic_auc(double t, std::span<const double> risk_scores, OutcomeSpan test_outcomes,
                                  const StepFunction& censor_km);

/// IPCW Brier score at t of predicted survival probabilities.
double brier_score(double t, std::span<const double> predicted_survival, OutcomeSpan test_outcomes,
                   const StepFunction& censor_km);

/// Trapezoidal integral of the Brier score over t_grid divided by its span.
/// curves[i][k] is the predicted survival of row i at t_grid[k].
double integrated_brier(std::span<const double> t_grid, const std::vector<std::vector<double>>& curves,
                        OutcomeSpan test_outcomes, const StepFunction& censor_km);

/// Confusion counts at a threshold; positive class = survived (label 1),
/// predicted positive iff probability >= threshold.
struct RocPoint {
  double threshold = 0.0;
  double tpr = 0.0;
  double fpr = 0.0;
  double tnr = 0.0;
  std::optional<double> npv;
  std::optional<double> ppv;
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
};

struct RocCurve {
  bool defined = false;
  std::string reason;  // why the curve is undefined
  std::vector<RocPoint> points;  // descending threshold
  std::optional<double> auc;
};

RocPoint confusion_at(std::span<const double> survival_probs, std::span<const int> labels, double threshold);
RocCurve roc_with_clinical_metrics(std::span<const double> survival_probs, std::span<const int> labels);

struct MetricValue {
  std::string name;
  double point = 0.0;
  double low = 0.0;
  double high = 0.0;
  std::size_t n_repeats = 0;
};

/// mean +- 1.96 * sd / sqrt(n), sample standard deviation.
MetricValue aggregate_ci(std::string name, std::span<const double> values);

// "0.714 (0.711-0.717)"
std::string format_metric(const MetricValue& m, int decimals = 3);
nlohmann::json to_json(const MetricValue& m);
nlohmann::json to_json(const RocPoint& p);
nlohmann::json to_json(const RocCurve& c);

}  // namespace caresurv
