#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "caresurv/cohort.hpp"

namespace caresurv {

struct SparseDropResult {
  Cohort cohort;
  std::vector<std::string> dropped;
};

/// Removes features whose missing rate is >= max_missing_fraction.
SparseDropResult drop_sparse_features(const Cohort& cohort, double max_missing_fraction = 0.75);

/// Pearson correlation on pairwise-complete rows; pairs involving a constant
/// column (within the pairwise subset) are reported as 0.
Eigen::MatrixXd pairwise_correlation(const Cohort& cohort);

struct PruneStep {
  std::string dropped;
  std::string kept;
  double correlation = 0.0;
  std::string rule;  // "missing_rate", "cox_coefficient" or "name"
};

struct PruneReport {
  std::vector<std::string> dropped;
  std::vector<std::string> surviving;
  std::vector<std::string> feature_names;  // row/column labels of `correlation`
  Eigen::MatrixXd correlation;
  std::vector<PruneStep> steps;
  double threshold = 0.7;

  nlohmann::json to_json() const;
};

struct PruneResult {
  Cohort cohort;
  PruneReport report;
};

/// Greedy elimination over pairs with |r| >= threshold in descending |r|.
/// Within a pair the feature with the higher missing rate goes; ties fall to
/// the smaller |univariate Cox coefficient|, then to the later name.
PruneResult prune_correlated(const Cohort& cohort, double threshold = 0.7);

/// Linear model of one feature on the others plus the donor pool used for
/// predictive mean matching.
struct ConditionalModel {
  std::size_t feature = 0;
  std::vector<std::size_t> predictors;
  Eigen::VectorXd coefficients;  // intercept first
  std::vector<double> donor_predictions;  // ascending
  std::vector<double> donor_values;       // aligned with donor_predictions
};

struct ImputationModelSet {
  std::vector<std::string> feature_names;
  std::vector<int> min_codes;
  std::vector<int> max_codes;
  std::vector<double> medians;
  std::vector<std::size_t> visit_order;
  std::vector<ConditionalModel> models;  // one per feature that had missing values
  int cycles = 10;
  std::uint64_t seed = 0;
  std::size_t donors = 5;

  const ConditionalModel* model_for(std::size_t feature) const;

  /// Completes a record with the stored models: median start, then `cycles`
  /// passes of prediction and donor matching over the missing fields.
  ResidentRecord apply(const ResidentRecord& record, std::uint64_t seed) const;
  Cohort apply(const Cohort& cohort) const;

  nlohmann::json to_json() const;
  static ImputationModelSet from_json(const nlohmann::json& j);
};

struct MiceResult {
  Cohort completed;
  ImputationModelSet models;
};

inline constexpr std::size_t kPmmDonors = 5;

/// Chained equations with predictive mean matching; see ImputationModelSet.
MiceResult fit_mice(const Cohort& cohort, int cycles = 10, std::uint64_t seed = 0);
Cohort mice_impute(const Cohort& cohort, int cycles = 10, std::uint64_t seed = 0);

}  // namespace caresurv
