#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "caresurv/ensemble.hpp"

namespace caresurv {

/// Additive attribution of a model margin (log-hazard scale).
struct ShapExplanation {
  std::vector<std::string> feature_names;
  std::vector<double> feature_values;
  double base_value = 0.0;
  std::vector<double> contributions;
  double margin = 0.0;
};

/// Path-dependent TreeSHAP summed over the ensemble's trees; expectations are
/// cover-weighted over the training rows that reached each node.
ShapExplanation tree_shap(const BoostedCoxModel& model, std::span<const double> x);
// Single tree; phi is accumulated into `phi` (size = number of features).
void tree_shap(const RegressionTree& tree, std::span<const double> x, std::span<double> phi);
// Cover-weighted mean leaf value of a tree.
double expected_value(const RegressionTree& tree);

/// Exact attribution of a Cox risk score relative to the training mean.
ShapExplanation linear_shap(const CoxModel& model, std::span<const double> x);

struct ShapSummary {
  std::vector<std::string> feature_names;
  std::vector<std::size_t> ranking;  // feature indices by mean |phi| descending
  std::vector<double> mean_abs;      // per feature, in feature order
  Eigen::MatrixXd shap;              // rows x features
  Eigen::MatrixXd values;            // feature values aligned with `shap`
  double base_value = 0.0;

  nlohmann::json to_json() const;
};

ShapSummary shap_summary(const BoostedCoxModel& model, const Eigen::MatrixXd& background);

struct DependenceData {
  std::string feature;
  std::vector<double> values;
  std::vector<double> shap;
  std::optional<std::string> partner;  // undefined for single-feature models
  std::vector<double> partner_values;
  std::vector<std::pair<std::string, double>> partner_scores;

  nlohmann::json to_json() const;
};

/// Partner = feature whose values best explain phi_feature within bins of the
/// chosen feature (size-weighted mean |within-bin correlation|; ties by name).
DependenceData shap_dependence(const ShapSummary& summary, const std::string& feature);
DependenceData shap_dependence(const BoostedCoxModel& model, const Eigen::MatrixXd& x, const std::string& feature);

struct WaterfallEntry {
  std::string label;
  double feature_value = 0.0;  // NaN for the collapsed entry
  double contribution = 0.0;
  double cumulative = 0.0;     // base value plus contributions so far
  std::size_t collapsed = 0;   // features folded into this entry
};

struct WaterfallData {
  double base_value = 0.0;
  double final_margin = 0.0;
  std::vector<WaterfallEntry> entries;

  nlohmann::json to_json() const;
};

/// Contributions by |phi| descending; beyond top_k (and any zero
/// contributions) collapse into one "remaining" entry.
WaterfallData waterfall_data(const ShapExplanation& explanation, std::size_t top_k);

struct SurvivalOverlay {
  std::vector<double> times;
  std::vector<double> individual;
  std::vector<double> cohort_average;

  nlohmann::json to_json() const;
};

SurvivalOverlay survival_overlay(const FittedModel& model, std::span<const double> record, const Eigen::MatrixXd& cohort,
                                 std::span<const double> times);

nlohmann::json to_json(const ShapExplanation& e);

}  // namespace caresurv
