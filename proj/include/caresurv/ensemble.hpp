#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "caresurv/survcore.hpp"

namespace caresurv {

struct TreeNode {
  std::int32_t feature = -1;  // -1 marks a leaf
  double threshold = 0.0;     // x < threshold goes left
  std::int32_t left = -1;
  std::int32_t right = -1;
  double cover = 0.0;  // training rows that reached the node
  double value = 0.0;  // output if the node were a leaf
};

struct RegressionTree {
  std::vector<TreeNode> nodes;  // nodes[0] is the root

  std::size_t leaf_index(std::span<const double> x) const;
  double predict(std::span<const double> x) const { return nodes[leaf_index(x)].value; }
  int depth() const;
  std::size_t num_leaves() const;
};

// ---------------------------------------------------------------------------
// Boosting with the Cox partial likelihood

enum class TreeKind { kLeastSquares, kSecondOrder };

struct BoostParams {
  std::string preset = "custom";
  TreeKind tree_kind = TreeKind::kSecondOrder;
  int n_rounds = 100;
  double learning_rate = 0.1;
  int max_depth = 3;
  int min_samples_split = 2;
  int min_samples_leaf = 1;
  double min_child_weight = 0.0;  // second-order trees: minimum hessian per child
  double subsample = 1.0;         // row fraction per round, without replacement
  int max_features = 0;           // candidate features per split (0 = all)
  double colsample_bytree = 1.0;  // feature fraction per tree
  double gamma = 0.0;             // minimum loss reduction kept after pruning
  double lambda = 0.0;            // L2 penalty on second-order leaf weights
  double dropout_rate = 0.0;      // DART-style tree dropout
  std::uint64_t seed = 0;
};

enum class BoostPreset {
  kGradientBoosting,  // least-squares trees, per-split feature sampling, dropout
  kXGBoost,           // second-order trees with gamma pruning
};

BoostParams boost_preset(BoostPreset preset);
BoostPreset boost_preset_from_string(std::string_view name);  // "gb" or "xgb"

struct BoostedCoxModel {
  std::vector<std::string> feature_names;
  std::vector<RegressionTree> trees;
  BoostParams params;
  // Leaf values already include the learning rate (and dropout rescaling).
  bool learning_rate_folded = true;
  StepFunction baseline_hazard;
  std::size_t clipped_scores = 0;
  // Training negative log partial likelihood / n after 0, 1, ..., n_rounds trees.
  std::vector<double> loss_trace;

  double margin(std::span<const double> x) const;
};

BoostedCoxModel fit_gbcox(const Eigen::MatrixXd& x, OutcomeSpan outcomes, std::vector<std::string> feature_names,
                          const BoostParams& params);

double predict_margin(const BoostedCoxModel& model, std::span<const double> x);
std::vector<double> predict_margin(const BoostedCoxModel& model, const Eigen::MatrixXd& x);

void write_loss_trace_csv(const BoostedCoxModel& model, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Random survival forest

struct ForestParams {
  int n_estimators = 592;
  int max_depth = 7;
  int min_samples_split = 2;
  int min_samples_leaf = 20;
  int max_features = 0;  // 0 = floor(sqrt(p))
  bool bootstrap = true;
  std::uint64_t seed = 0;
};

ForestParams forest_preset();

struct SurvivalTree {
  RegressionTree tree;  // leaf value = sum of the leaf hazard over `unique_times`
  std::vector<StepFunction> leaf_hazards;  // indexed by node; empty for internal nodes
  std::uint64_t seed = 0;
};

struct SurvivalForestModel {
  std::vector<std::string> feature_names;
  std::vector<SurvivalTree> trees;
  ForestParams params;
  std::vector<double> unique_times;  // distinct training times

  // Average leaf cumulative hazard at t.
  double cumulative_hazard(std::span<const double> x, double t) const;
  // Ensemble mortality: average over trees of the leaf hazard summed over unique_times.
  double risk_score(std::span<const double> x) const;
};

SurvivalForestModel fit_rsf(const Eigen::MatrixXd& x, OutcomeSpan outcomes, std::vector<std::string> feature_names,
                            const ForestParams& params);

/// Two-sample log-rank statistic |U| / sqrt(V) of group membership.
double logrank_statistic(OutcomeSpan outcomes, std::span<const bool> in_group);

// ---------------------------------------------------------------------------
// Any fitted model

using FittedModel = std::variant<CoxModel, BoostedCoxModel, SurvivalForestModel>;

std::string model_kind(const FittedModel& model);
const std::vector<std::string>& model_feature_names(const FittedModel& model);
// Higher means higher predicted risk.
double risk_score(const FittedModel& model, std::span<const double> x);
SurvivalCurve predict_survival_any(const FittedModel& model, std::span<const double> x, std::span<const double> times);

}  // namespace caresurv
