#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "caresurv/calibrate.hpp"
#include "caresurv/cohort.hpp"
#include "caresurv/ensemble.hpp"
#include "caresurv/explain.hpp"
#include "caresurv/impute.hpp"

namespace caresurv {

inline constexpr int kBundleSchemaVersion = 1;
inline constexpr const char* kBundleFormat = "caresurv.bundle";

struct BundleProvenance {
  std::string config_hash;
  std::string data_hash;
  std::uint64_t seed = 0;
  std::string algorithm;
  nlohmann::json metrics = nlohmann::json::object();
};

/// Everything the service needs to answer requests for one trained model.
struct ModelBundle {
  int schema_version = kBundleSchemaVersion;
  FittedModel model;
  std::vector<PlattScaler> scalers;  // unique horizons, ascending
  SurvivalCurve cohort_baseline;     // mean predicted survival over the training rows
  std::vector<FeatureSpec> features; // aligned with the model's feature list
  std::optional<ImputationModelSet> imputation;
  BundleProvenance provenance;

  // Throws ValidationError when an invariant does not hold.
  void validate() const;
  const PlattScaler* scaler_for(int horizon_days) const;
};

nlohmann::json feature_spec_to_json(const FeatureSpec& f);
FeatureSpec feature_spec_from_json(const nlohmann::json& j);

nlohmann::json model_to_json(const FittedModel& model);
FittedModel model_from_json(const nlohmann::json& j);

/// File layout: one JSON header line {format, schema_version, payload_bytes,
/// sha256} followed by the JSON payload; numeric arrays are base64 packed.
std::string serialize_bundle(const ModelBundle& bundle);
ModelBundle deserialize_bundle(const std::string& text);
void save_bundle(const ModelBundle& bundle, const std::filesystem::path& path);
// Throws FormatError on version mismatch, truncation or checksum failure.
ModelBundle load_bundle(const std::filesystem::path& path);

// SHA-256 of the payload; identifies the model in responses.
std::string bundle_id(const ModelBundle& bundle);

struct TrainOptions {
  std::string algorithm = "xgb";
  std::vector<int> horizons = {30, 91, 182, 365};
  double inner_train_fraction = 0.9;
  double max_missing_fraction = 0.75;
  double correlation_threshold = 0.7;
  int mice_cycles = 10;
  std::uint64_t seed = 0;
  nlohmann::json params = nlohmann::json::object();
  std::string config_hash;
  std::vector<double> curve_times;  // empty = weekly grid to 2 years
};

/// Drops sparse features, prunes correlated ones, fits the imputation models,
/// fits the model on the inner training split and the Platt scalers on the
/// inner validation split, then records the cohort baseline curve.
ModelBundle train_bundle(const Cohort& cohort, const TrainOptions& options);

// Survival curve grid used when TrainOptions::curve_times is empty.
std::vector<double> default_curve_times();

/// Attribution of the model's risk score: TreeSHAP for tree ensembles
/// (averaged over trees for forests) and the exact linear form for Cox.
ShapExplanation explain_any(const FittedModel& model, std::span<const double> x);

struct HttpResult {
  int status = 200;
  nlohmann::json body;
};

/// Stateless request handling over an immutable bundle; the bundle can be
/// replaced atomically while requests are in flight.
class PredictionService {
 public:
  PredictionService() = default;
  explicit PredictionService(std::shared_ptr<const ModelBundle> bundle);

  void set_bundle(std::shared_ptr<const ModelBundle> bundle);
  std::shared_ptr<const ModelBundle> bundle() const;

  HttpResult health() const;
  HttpResult metadata() const;
  HttpResult cohort_baseline() const;
  HttpResult predict(const std::string& body) const;
  HttpResult explain(const std::string& body) const;
  HttpResult whatif(const std::string& body) const;
  // Routes by method and path; unknown routes give 404.
  HttpResult handle(const std::string& method, const std::string& path, const std::string& body) const;

 private:
  struct Loaded {
    std::shared_ptr<const ModelBundle> bundle;
    std::string id;
  };
  std::shared_ptr<const Loaded> snapshot() const;

  mutable std::mutex mutex_;
  std::shared_ptr<const Loaded> loaded_;
};

// Rounds to 4 decimal places for serialized probabilities.
double round4(double p);

/// Blocking HTTP/1.1 server over the service; returns when stop() is called.
class HttpServer {
 public:
  explicit HttpServer(PredictionService& service);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  // Binds to host:port (port 0 picks a free port) and returns the bound port.
  int bind(const std::string& host, int port);
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace caresurv
