#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "caresurv/error.hpp"
#include "caresurv/outcome.hpp"

namespace caresurv {

struct AnswerCode {
  std::string answer;
  int code = 0;
};

/// One ordinal predictor: its canonical column name, the assessment question,
/// the admissible code range and the answer vocabulary that maps onto it.
struct FeatureSpec {
  std::string name;
  std::string question;
  int min_code = 0;
  int max_code = 0;
  // Empty means every integer in [min_code, max_code] is admissible.
  std::vector<int> allowed_codes;
  std::vector<AnswerCode> answers;
  // Non-empty for count features: text is a ';'-separated list of items and
  // the code is the number of distinct items named.
  std::vector<std::string> counted_items;

  bool admits(double value) const;
  // Answer text (trimmed, case-insensitive) or an integer literal to code.
  // Throws ValidationError naming the feature and the text.
  int encode(std::string_view text) const;
  // Answer labels per code, first listed answer wins.
  std::vector<std::pair<int, std::string>> code_labels() const;
};

// Canonical predictors in column order.
enum class Feature : std::size_t {
  kAge,
  kGenderMale,
  kFallsHistory,
  kChessScale,
  kRxRisk,
  kSpecificHealthConditions,
  kCognitivePerformance,
  kDepressionRating,
  kWeightLoss,
  kPoorEating,
  kMobilisation,
  kMobilityEquipment,
  kSmoking,
  kSleepAssist,
  kSkinIntegrity,
  kPressureUlcerRisk,
  kFaecalIncontinence,
  kUrinaryIncontinence,
  kCount,
};

inline constexpr std::size_t kNumCanonicalFeatures = static_cast<std::size_t>(Feature::kCount);

const std::vector<FeatureSpec>& canonical_schema();
const FeatureSpec& canonical_feature(Feature f);
std::optional<std::size_t> find_feature(std::span<const FeatureSpec> schema, std::string_view name);

struct FieldError {
  std::string field;
  std::string message;
};

/// Validation failure that names every offending field.
class RecordError : public ValidationError {
 public:
  explicit RecordError(std::vector<FieldError> errors);
  const std::vector<FieldError>& errors() const { return errors_; }

 private:
  std::vector<FieldError> errors_;
};

/// Predictor values aligned with a schema; std::nullopt marks a missing field.
struct ResidentRecord {
  std::vector<std::optional<double>> values;

  bool complete() const;
  std::size_t missing_count() const;
};

/// Immutable cohort: a schema plus aligned records and outcomes.
class Cohort {
 public:
  Cohort() = default;
  // Throws ValidationError on misalignment or out-of-range values.
  Cohort(std::vector<FeatureSpec> features, std::vector<ResidentRecord> records, Outcomes outcomes);

  const std::vector<FeatureSpec>& features() const { return features_; }
  const std::vector<ResidentRecord>& records() const { return records_; }
  const Outcomes& outcomes() const { return outcomes_; }
  std::size_t size() const { return records_.size(); }
  std::size_t num_features() const { return features_.size(); }
  std::vector<std::string> feature_names() const;

  const std::vector<double>& missing_rates() const { return missing_rates_; }
  double event_fraction() const;
  bool complete() const;

  // Dense n x p matrix; throws ValidationError if any value is missing.
  Eigen::MatrixXd matrix() const;

  Cohort select_rows(std::span<const std::size_t> rows) const;
  Cohort select_features(std::span<const std::size_t> columns) const;
  Cohort with_records(std::vector<ResidentRecord> records) const;
  // Appends a feature column; values must align with the records.
  Cohort with_feature(FeatureSpec spec, std::span<const std::optional<double>> values) const;

 private:
  std::vector<FeatureSpec> features_;
  std::vector<ResidentRecord> records_;
  Outcomes outcomes_;
  std::vector<double> missing_rates_;
};

// ---------------------------------------------------------------------------
// Encoding and the earliest-observation rule

struct TimedObservation {
  std::string feature;
  std::string answer;
  int days_since_admission = 0;
};

inline constexpr int kDefaultObservationWindowDays = 31;

/// Keeps, per feature, the earliest observation taken within `window_days` of
/// admission. Same-day duplicates resolve to the lexicographically smallest
/// answer so the result does not depend on input order.
ResidentRecord select_earliest_within_window(std::span<const TimedObservation> observations,
                                             int window_days = kDefaultObservationWindowDays);

/// Maps raw answer text per canonical feature to ordinal codes. Fields not
/// present (or answered "Missing"/blank) are flagged missing.
ResidentRecord encode_record(const std::map<std::string, std::string>& raw_answers);

// ---------------------------------------------------------------------------
// CSV ingestion

struct CsvSchema {
  std::vector<FeatureSpec> features = canonical_schema();
  std::string time_column = "time_days";
  std::string event_column = "event";
  std::string reason_column = "censor_reason";  // optional in the file
};

struct RowError {
  std::size_t line = 0;
  std::string message;
};

struct IngestResult {
  Cohort cohort;
  std::size_t rows_read = 0;
  std::size_t rejected_nonpositive_time = 0;
  std::vector<RowError> errors;
};

inline constexpr double kMaxMalformedFraction = 0.10;

IngestResult ingest_csv(const std::filesystem::path& path, const CsvSchema& schema = {});
void write_csv(const Cohort& cohort, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Synthetic cohort with ground-truth hazards

struct Interaction {
  std::string first;
  std::string second;
  double coefficient = 0.0;
};

struct SimConfig {
  std::size_t n = 12000;
  // Log-hazard coefficients per canonical feature, applied to centred codes.
  std::map<std::string, double> coefficients = default_coefficients();
  std::vector<Interaction> interactions;
  double weibull_shape = 0.75;
  double weibull_scale_days = 900.0;
  // Event fraction the random censoring is tuned to; >= 1 disables it.
  double event_fraction_target = 0.56;
  double event_fraction_tolerance = 0.03;
  // Staggered-entry administrative censoring, uniform on [1, days]; 0 disables.
  int admin_followup_days = 2250;
  std::map<std::string, double> missing_rates = default_missing_rates();
  // Loading of the shared latent factor in the Gaussian copula (0 = independent).
  double latent_loading = 0.3;
  // After onset, the log-hazard gains an independent N(0, sd^2) shock.
  double late_noise_sd = 0.0;
  int late_noise_onset_days = 30;
  int max_tuning_iterations = 200;

  static std::map<std::string, double> default_coefficients();
  static std::map<std::string, double> default_missing_rates();
};

SimConfig sim_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SimConfig& config);

/// Data-generating model behind a simulated cohort.
struct GroundTruth {
  std::vector<double> coefficients;  // canonical order
  std::vector<double> centers;       // marginal means the coefficients act on
  struct Term {
    std::size_t first = 0;
    std::size_t second = 0;
    double coefficient = 0.0;
  };
  std::vector<Term> interactions;
  double weibull_shape = 1.0;
  double weibull_scale_days = 1.0;
  double late_noise_sd = 0.0;
  int late_noise_onset_days = 0;

  double linear_predictor(std::span<const double> x) const;
  double baseline_cumulative_hazard(double t) const;
  // S(t | x), marginalised over the late-time shock when one is configured.
  double survival(std::span<const double> x, double t) const;
};

struct SimulationResult {
  Cohort cohort;
  GroundTruth truth;
  // Complete feature matrix before missingness was applied.
  Eigen::MatrixXd complete_features;
  double achieved_event_fraction = 0.0;
};

/// Draws a cohort from published per-item marginals through a one-factor Gaussian
/// copula, generates Weibull proportional-hazards event times and tunes random
/// censoring to the target event fraction. Deterministic in (config, seed).
SimulationResult simulate_cohort(const SimConfig& config, std::uint64_t seed);

// Category probabilities (code, p) used by the simulator for a feature.
std::vector<std::pair<int, double>> simulation_marginal(Feature f);

}  // namespace caresurv
