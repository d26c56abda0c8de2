#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "caresurv/calibrate.hpp"
#include "caresurv/cohort.hpp"
#include "caresurv/ensemble.hpp"
#include "caresurv/metrics.hpp"

namespace caresurv {

inline constexpr int kReportSchemaVersion = 1;

// Algorithm identifiers in default report order.
const std::vector<std::string>& known_algorithms();
// Display label ("xgb" -> "XGB"); throws ValidationError on an unknown id.
std::string algorithm_label(const std::string& algorithm);

enum class CIndexEstimator { kIpcw, kHarrell };

struct ExperimentConfig {
  std::vector<std::string> algorithms = known_algorithms();
  int n_repeats = 20;
  double train_fraction = 0.9;
  double inner_train_fraction = 0.9;
  std::uint64_t seed = 20240101;
  std::vector<int> horizons = {30, 91, 182, 365};
  std::string calibrated_algorithm = "xgb";
  // Table column -> estimator; columns "C-index" and "Harrell".
  std::map<std::string, CIndexEstimator> metric_mapping = {{"C-index", CIndexEstimator::kIpcw},
                                                            {"Harrell", CIndexEstimator::kHarrell}};
  double max_missing_fraction = 0.75;
  double correlation_threshold = 0.7;
  int mice_cycles = 10;
  // Adds a feature equal to the event indicator on test rows and 0 on training rows.
  bool leakage_canary = false;
  int threads = 1;
  double roc_threshold = 0.2;
  int clinical_horizon = 182;
  // Per-algorithm parameter overrides, e.g. {"rf": {"n_estimators": 100}}.
  nlohmann::json params = nlohmann::json::object();

  // Throws ValidationError naming the offending field.
  void validate() const;
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  // SHA-256 of the canonical JSON form.
  std::string hash() const;
};

inline constexpr const char* kCanaryFeature = "outcome_canary";

/// Simulator settings used for protocol runs: pairwise interactions that a
/// proportional-hazards model cannot represent and a late-time hazard shock.
SimConfig protocol_scenario();

/// Stratified by event indicator; returns (train rows, test rows), each ascending.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_split(const Outcomes& outcomes,
                                                                                double train_fraction,
                                                                                std::uint64_t seed);

/// Fits one algorithm with its preset (plus overrides). Cox-family fits
/// exclude training-constant columns; `columns` lists the columns used.
struct AlgorithmFit {
  FittedModel model;
  std::vector<std::size_t> columns;

  double risk(const Eigen::MatrixXd& x, Eigen::Index row) const;
  std::vector<double> risks(const Eigen::MatrixXd& x) const;
};

AlgorithmFit fit_algorithm(const std::string& algorithm, const Eigen::MatrixXd& x, OutcomeSpan outcomes,
                           const std::vector<std::string>& feature_names, std::uint64_t seed,
                           const nlohmann::json& params = nlohmann::json::object());

// Split count on a feature and its summed |SHAP| over `rows` of x.
struct FeatureUsage {
  std::size_t splits = 0;
  double shap_mass = 0.0;
};

FeatureUsage feature_usage(const AlgorithmFit& fit, std::size_t column, const Eigen::MatrixXd& x);

struct CellFailure {
  int repeat = 0;
  std::string message;
};

/// One table row: metrics aggregated over successful repeats and the raw values.
struct ReportRow {
  std::string key;    // algorithm id or horizon in days
  std::string label;  // display label
  std::vector<std::string> metric_names;
  std::map<std::string, MetricValue> metrics;  // absent = no successful repeat
  std::map<std::string, std::vector<double>> values;
  std::vector<CellFailure> failures;
};

struct RepeatDiagnostics {
  int repeat = 0;
  std::uint64_t seed = 0;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
  double test_event_fraction = 0.0;
  std::vector<std::string> dropped_sparse;
  std::vector<std::string> dropped_correlated;
  // Algorithm -> canary usage; only present when the canary is enabled.
  std::map<std::string, FeatureUsage> canary;
};

struct ClinicalSummary {
  int horizon_days = 0;
  double threshold = 0.0;
  std::optional<RocPoint> pooled_confusion;
  std::optional<CalibrationCurve> pooled_calibration;
};

struct ExperimentReport {
  int schema_version = kReportSchemaVersion;
  nlohmann::json config = nlohmann::json::object();
  std::string config_hash;
  std::string data_hash;
  std::uint64_t seed = 0;
  std::size_t n_rows = 0;
  double cohort_event_fraction = 0.0;
  std::vector<ReportRow> discrimination;  // one row per algorithm
  std::string calibrated_algorithm;
  std::vector<ReportRow> horizons;        // one row per horizon
  std::vector<RepeatDiagnostics> repeats;
  ClinicalSummary clinical;

  const ReportRow* discrimination_row(const std::string& algorithm) const;
  nlohmann::json to_json() const;
  // Throws FormatError on a schema version mismatch or a malformed document.
  static ExperimentReport from_json(const nlohmann::json& j);
};

// SHA-256 over feature names, values (missing marked) and outcomes.
std::string cohort_hash(const Cohort& cohort);

/// Repeated stratified splits; per repeat the training fold alone drives
/// sparse-feature removal, correlation pruning, imputation models, model
/// fits and Platt scalers, and the test fold is only scored.
ExperimentReport run_experiments(const Cohort& cohort, const ExperimentConfig& config);

enum class ReportFormat { kJson, kCsv, kMarkdown };
ReportFormat report_format_from_string(const std::string& name);

std::string render_report(const ExperimentReport& report, ReportFormat format);
// Throws std::runtime_error when the path cannot be written.
void export_report(const ExperimentReport& report, ReportFormat format, const std::filesystem::path& path);
ExperimentReport load_report(const std::filesystem::path& path);

}  // namespace caresurv
