#include "caresurv/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <random>
#include <set>
#include <thread>

#include "caresurv/explain.hpp"
#include "caresurv/impute.hpp"
#include "caresurv/util.hpp"

namespace caresurv {

namespace {

const std::map<std::string, std::string>& label_table() {
  static const std::map<std::string, std::string> labels{{"coxph", "CoxPH"}, {"ridge", "Ridge"}, {"lasso", "Lasso"},
                                                         {"elastic", "Elastic"}, {"gb", "GB"},     {"xgb", "XGB"},
                                                         {"rf", "RF"}};
  return labels;
}

std::string estimator_name(CIndexEstimator e) { return e == CIndexEstimator::kIpcw ? "ipcw" : "harrell"; }

CIndexEstimator estimator_from_name(const std::string& name) {
  if (name == "ipcw") return CIndexEstimator::kIpcw;
  if (name == "harrell") return CIndexEstimator::kHarrell;
  throw ValidationError("metric_mapping: unknown estimator '" + name + "' (expected ipcw or harrell)");
}

template <typename T>
void take(const nlohmann::json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
  for (const auto& [k, v] : j.items()) {
    if (!allowed.count(k)) throw ValidationError(where + ": unknown parameter '" + k + "'");
  }
}

CoxOptions cox_options(const nlohmann::json& j) {
  CoxOptions o;
  check_keys(j, {"max_iterations", "gradient_tolerance"}, "coxph");
  take(j, "max_iterations", o.max_iterations);
  take(j, "gradient_tolerance", o.gradient_tolerance);
  return o;
}

PenaltyParams penalty_params(const std::string& algorithm, const nlohmann::json& j) {
  PenaltyParams p = penalty_preset(algorithm == "ridge"   ? PenaltyPreset::kRidge
                                   : algorithm == "lasso" ? PenaltyPreset::kLasso
                                                          : PenaltyPreset::kElastic);
  check_keys(j, {"alpha", "l1_ratio", "alpha_min_ratio", "max_sweeps", "tolerance"}, algorithm);
  take(j, "alpha", p.alpha);
  take(j, "l1_ratio", p.l1_ratio);
  if (j.contains("alpha_min_ratio")) p.alpha_min_ratio = j.at("alpha_min_ratio").get<double>();
  take(j, "max_sweeps", p.max_sweeps);
  take(j, "tolerance", p.tolerance);
  return p;
}

BoostParams boost_params(const std::string& algorithm, const nlohmann::json& j, std::uint64_t seed) {
  BoostParams p = boost_preset(boost_preset_from_string(algorithm));
  check_keys(j,
             {"n_rounds", "learning_rate", "max_depth", "min_samples_split", "min_samples_leaf", "min_child_weight",
              "subsample", "max_features", "colsample_bytree", "gamma", "lambda", "dropout_rate"},
             algorithm);
  take(j, "n_rounds", p.n_rounds);
  take(j, "learning_rate", p.learning_rate);
  take(j, "max_depth", p.max_depth);
  take(j, "min_samples_split", p.min_samples_split);
  take(j, "min_samples_leaf", p.min_samples_leaf);
  take(j, "min_child_weight", p.min_child_weight);
  take(j, "subsample", p.subsample);
  take(j, "max_features", p.max_features);
  take(j, "colsample_bytree", p.colsample_bytree);
  take(j, "gamma", p.gamma);
  take(j, "lambda", p.lambda);
  take(j, "dropout_rate", p.dropout_rate);
  p.seed = seed;
  return p;
}

ForestParams forest_params(const nlohmann::json& j, std::uint64_t seed) {
  ForestParams p = forest_preset();
  check_keys(j, {"n_estimators", "max_depth", "min_samples_split", "min_samples_leaf", "max_features", "bootstrap"},
             "rf");
  take(j, "n_estimators", p.n_estimators);
  take(j, "max_depth", p.max_depth);
  take(j, "min_samples_split", p.min_samples_split);
  take(j, "min_samples_leaf", p.min_samples_leaf);
  take(j, "max_features", p.max_features);
  take(j, "bootstrap", p.bootstrap);
  p.seed = seed;
  return p;
}

std::vector<double> row_of(const Eigen::MatrixXd& x, Eigen::Index i, const std::vector<std::size_t>& columns) {
  std::vector<double> r(columns.size());
  for (std::size_t k = 0; k < columns.size(); ++k) r[k] = x(i, static_cast<Eigen::Index>(columns[k]));
  return r;
}

Outcomes select(const Outcomes& o, const std::vector<std::size_t>& rows) {
  Outcomes out;
  out.reserve(rows.size());
  for (auto r : rows) out.push_back(o[r]);
  return out;
}

Eigen::MatrixXd select_rows(const Eigen::MatrixXd& x, const std::vector<std::size_t>& rows) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = x.row(static_cast<Eigen::Index>(rows[k]));
  return out;
}

std::vector<std::size_t> columns_by_name(const Cohort& cohort, const std::vector<std::string>& names) {
  const auto all = cohort.feature_names();
  std::vector<std::size_t> cols;
  for (const auto& n : names) {
    auto it = std::find(all.begin(), all.end(), n);
    if (it == all.end()) throw ValidationError("feature '" + n + "' missing from the test fold");
    cols.push_back(static_cast<std::size_t>(it - all.begin()));
  }
  return cols;
}

Outcomes truncate_at(OutcomeSpan outcomes, int horizon) {
  Outcomes out(outcomes.begin(), outcomes.end());
  for (auto& o : out) {
    if (o.time_days > horizon) {
      o.time_days = horizon;
      o.event = false;
      o.reason = CensorReason::kCurrentResident;
    }
  }
  return out;
}

std::string horizon_label(int days) {
  switch (days) {
    case 30:
      return "1 month";
    case 91:
      return "3 months";
    case 182:
      return "6 months";
    case 365:
      return "12 months";
    default:
      return std::to_string(days) + " days";
  }
}

std::optional<double> cindex(CIndexEstimator e, OutcomeSpan train, std::span<const double> scores, OutcomeSpan test,
                             double tau) {
  if (e == CIndexEstimator::kHarrell) {
    const Outcomes truncated = truncate_at(test, static_cast<int>(std::floor(tau)));
    return harrell_cindex(scores, truncated);
  }
  return ipcw_cindex(train, scores, test, tau);
}

// Metric values of one repeat for one table row; an error string marks failure.
struct CellResult {
  std::map<std::string, double> values;
  std::string error;
};

struct RepeatResult {
  RepeatDiagnostics diagnostics;
  std::map<std::string, CellResult> algorithms;
  std::map<int, CellResult> horizons;
  std::map<int, std::vector<double>> horizon_probs;
  std::map<int, std::vector<int>> horizon_labels;
};

const char* kDiscriminationMetrics[] = {"C-index", "Harrell", "AUROC"};
const char* kHorizonMetrics[] = {"Dynamic AUROC", "IBS", "C-index", "Harrell"};

std::vector<std::size_t> canary_shap_rows(OutcomeSpan test, std::size_t per_class) {
  std::vector<std::size_t> ev, ce;
  for (std::size_t i = 0; i < test.size(); ++i) (test[i].event ? ev : ce).push_back(i);
  ev.resize(std::min(ev.size(), per_class));
  ce.resize(std::min(ce.size(), per_class));
  ev.insert(ev.end(), ce.begin(), ce.end());
  std::sort(ev.begin(), ev.end());
  return ev;
}

RepeatResult run_repeat(const Cohort& cohort, const ExperimentConfig& config, int r) {
  RepeatResult out;
  auto& diag = out.diagnostics;
  diag.repeat = r;
  diag.seed = derive_seed(config.seed, static_cast<std::uint64_t>(r));
  const std::uint64_t seed = diag.seed;

  const auto [train_rows, test_rows] = stratified_split(cohort.outcomes(), config.train_fraction, derive_seed(seed, 0));
  diag.n_train = train_rows.size();
  diag.n_test = test_rows.size();

  Cohort full = cohort;
  if (config.leakage_canary) {
    std::vector<std::optional<double>> values(cohort.size(), 0.0);
    for (auto i : test_rows) values[i] = cohort.outcomes()[i].event ? 1.0 : 0.0;
    FeatureSpec spec;
    spec.name = kCanaryFeature;
    spec.question = "Event indicator on test rows, 0 on training rows";
    spec.min_code = 0;
    spec.max_code = 1;
    full = cohort.with_feature(spec, values);
  }
  const Cohort train_raw = full.select_rows(train_rows);
  const Cohort test_raw = full.select_rows(test_rows);
  const Outcomes& train_o = train_raw.outcomes();
  const Outcomes& test_o = test_raw.outcomes();
  diag.test_event_fraction = test_raw.event_fraction();

  auto sparse = drop_sparse_features(train_raw, config.max_missing_fraction);
  diag.dropped_sparse = sparse.dropped;
  auto pruned = prune_correlated(sparse.cohort, config.correlation_threshold);
  diag.dropped_correlated = pruned.report.dropped;
  auto mice = fit_mice(pruned.cohort, config.mice_cycles, derive_seed(seed, 1));
  const auto names = mice.completed.feature_names();
  const auto test_cols = columns_by_name(test_raw, names);
  const Cohort test_imp = mice.models.apply(test_raw.select_features(test_cols));
  const Eigen::MatrixXd xtr = mice.completed.matrix();
  const Eigen::MatrixXd xte = test_imp.matrix();

  std::optional<std::size_t> canary_col;
  if (config.leakage_canary) {
    auto it = std::find(names.begin(), names.end(), kCanaryFeature);
    if (it != names.end()) canary_col = static_cast<std::size_t>(it - names.begin());
  }
  const auto shap_rows = canary_shap_rows(test_o, 50);
  Eigen::MatrixXd xshap = select_rows(xte, shap_rows);

  const double tau = std::min(std::max_element(train_o.begin(), train_o.end(),
                                               [](auto& a, auto& b) { return a.time_days < b.time_days; })
                                  ->time_days,
                              std::max_element(test_o.begin(), test_o.end(),
                                               [](auto& a, auto& b) { return a.time_days < b.time_days; })
                                  ->time_days);
  const StepFunction censor_km = censoring_kaplan_meier(train_o);

  for (std::size_t a = 0; a < config.algorithms.size(); ++a) {
    const auto& alg = config.algorithms[a];
    CellResult cell;
    try {
      const auto fit = fit_algorithm(alg, xtr, train_o, names, derive_seed(seed, 10 + a),
                                     config.params.value(alg, nlohmann::json::object()));
      const auto scores = fit.risks(xte);
      for (const auto& [column, est] : config.metric_mapping) {
        auto c = cindex(est, train_o, scores, test_o, tau);
        if (!c) throw ValidationError(column + " undefined: no comparable pairs");
        cell.values[column] = *c;
      }
      double auc_sum = 0;
      int auc_n = 0;
      for (int h : config.horizons) {
        if (auto v = dynamic_auc(h, scores, test_o, censor_km)) {
          auc_sum += *v;
          ++auc_n;
        }
      }
      if (auc_n == 0) throw ValidationError("AUROC undefined at every horizon");
      cell.values["AUROC"] = auc_sum / auc_n;
      if (canary_col) diag.canary[alg] = feature_usage(fit, *canary_col, xshap);
    } catch (const std::exception& e) {
      cell.values.clear();
      cell.error = e.what();
    }
    out.algorithms[alg] = std::move(cell);
  }

  if (config.calibrated_algorithm.empty() || config.horizons.empty()) return out;

  std::string calib_error;
  std::optional<AlgorithmFit> calib;
  Outcomes inner_val_o;
  std::vector<double> val_scores;
  try {
    const auto [inner_rows, val_rows] = stratified_split(train_o, config.inner_train_fraction, derive_seed(seed, 2));
    const Eigen::MatrixXd xin = select_rows(xtr, inner_rows);
    const Outcomes inner_o = select(train_o, inner_rows);
    inner_val_o = select(train_o, val_rows);
    const auto alg = config.calibrated_algorithm;
    calib = fit_algorithm(alg, xin, inner_o, names, derive_seed(seed, 9),
                          config.params.value(alg, nlohmann::json::object()));
    val_scores = calib->risks(select_rows(xtr, val_rows));
    if (canary_col) diag.canary["calibrated:" + alg] = feature_usage(*calib, *canary_col, xshap);
  } catch (const std::exception& e) {
    calib_error = e.what();
  }

  std::vector<double> test_scores;
  if (calib) test_scores = calib->risks(xte);
  for (int h : config.horizons) {
    CellResult cell;
    if (!calib) {
      cell.error = calib_error;
      out.horizons[h] = std::move(cell);
      continue;
    }
    try {
      const auto scaler = fit_platt_at_horizon(val_scores, inner_val_o, h);
      std::vector<double> probs(test_scores.size());
      for (std::size_t i = 0; i < probs.size(); ++i) probs[i] = scaler.predict(test_scores[i]);
      std::vector<double> risk(probs.size());
      for (std::size_t i = 0; i < probs.size(); ++i) risk[i] = -probs[i];

      auto auc = dynamic_auc(h, test_scores, test_o, censor_km);
      if (!auc) throw ValidationError("dynamic AUROC undefined at " + std::to_string(h) + " days");
      cell.values["Dynamic AUROC"] = *auc;

      std::vector<double> grid;
      const int steps = std::min(h, 50);
      for (int k = 0; k <= steps; ++k) grid.push_back(1.0 + (h - 1.0) * k / steps);
      grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
      if (grid.size() < 2) throw ValidationError("IBS needs a horizon beyond day 1");
      std::vector<std::vector<double>> curves(probs.size());
      const std::vector<double> at_h{static_cast<double>(h)};
      for (std::size_t i = 0; i < probs.size(); ++i) {
        const auto row = row_of(xte, static_cast<Eigen::Index>(i), calib->columns);
        const auto base = predict_survival_any(calib->model, row, grid).survival;
        const double sh = predict_survival_any(calib->model, row, at_h).survival[0];
        auto& c = curves[i];
        c.resize(grid.size());
        for (std::size_t k = 0; k < grid.size(); ++k) {
          if (sh > 0.0 && sh < 1.0 && base[k] > 0.0) {
            c[k] = std::pow(probs[i], std::log(base[k]) / std::log(sh));
          } else {
            c[k] = base[k];
          }
        }
      }
      const double ibs = integrated_brier(grid, curves, test_o, censor_km);
      if (!std::isfinite(ibs)) throw ValidationError("IBS is not finite");
      cell.values["IBS"] = ibs;

      for (const auto& [column, est] : config.metric_mapping) {
        auto c = cindex(est, train_o, risk, test_o, h);
        if (!c) throw ValidationError(column + " undefined at " + std::to_string(h) + " days");
        cell.values[column] = *c;
      }

      const auto labels = binarize_at_horizon(test_o, h);
      auto& pp = out.horizon_probs[h];
      auto& pl = out.horizon_labels[h];
      for (std::size_t i = 0; i < probs.size(); ++i) {
        if (!labels.included[i]) continue;
        pp.push_back(probs[i]);
        pl.push_back(labels.labels[i]);
      }
    } catch (const std::exception& e) {
      cell.values.clear();
      cell.error = e.what();
    }
    out.horizons[h] = std::move(cell);
  }
  return out;
}

RepeatResult failed_repeat(const ExperimentConfig& config, int r, const std::string& message) {
  RepeatResult out;
  out.diagnostics.repeat = r;
  out.diagnostics.seed = derive_seed(config.seed, static_cast<std::uint64_t>(r));
  for (const auto& a : config.algorithms) out.algorithms[a].error = message;
  if (!config.calibrated_algorithm.empty()) {
    for (int h : config.horizons) out.horizons[h].error = message;
  }
  return out;
}

ReportRow aggregate_row(std::string key, std::string label, const char* const* metrics, std::size_t n_metrics,
                        const std::vector<RepeatResult>& results,
                        const std::function<const CellResult*(const RepeatResult&)>& cell_of) {
  ReportRow row;
  row.key = std::move(key);
  row.label = std::move(label);
  for (std::size_t m = 0; m < n_metrics; ++m) row.metric_names.emplace_back(metrics[m]);
  for (const auto& res : results) {
    const CellResult* cell = cell_of(res);
    if (!cell) continue;
    if (!cell->error.empty()) {
      row.failures.push_back({res.diagnostics.repeat, cell->error});
      continue;
    }
    for (const auto& m : row.metric_names) row.values[m].push_back(cell->values.at(m));
  }
  for (const auto& m : row.metric_names) {
    auto it = row.values.find(m);
    if (it != row.values.end() && !it->second.empty()) row.metrics[m] = aggregate_ci(m, it->second);
  }
  return row;
}

}  // namespace

const std::vector<std::string>& known_algorithms() {
  static const std::vector<std::string> algs{"coxph", "ridge", "lasso", "elastic", "gb", "xgb", "rf"};
  return algs;
}

std::string algorithm_label(const std::string& algorithm) {
  auto it = label_table().find(algorithm);
  if (it == label_table().end()) throw ValidationError("unknown algorithm '" + algorithm + "'");
  return it->second;
}

void ExperimentConfig::validate() const {
  if (algorithms.empty()) throw ValidationError("algorithms: at least one algorithm is required");
  std::set<std::string> seen;
  for (const auto& a : algorithms) {
    algorithm_label(a);
    if (!seen.insert(a).second) throw ValidationError("algorithms: '" + a + "' listed twice");
  }
  if (!calibrated_algorithm.empty()) algorithm_label(calibrated_algorithm);
  if (n_repeats < 1) throw ValidationError("n_repeats must be >= 1");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ValidationError("train_fraction must lie in (0, 1)");
  if (!(inner_train_fraction > 0.0 && inner_train_fraction < 1.0)) {
    throw ValidationError("inner_train_fraction must lie in (0, 1)");
  }
  std::set<int> hs;
  for (int h : horizons) {
    if (h < 1) throw ValidationError("horizons must be positive days");
    if (!hs.insert(h).second) throw ValidationError("horizons: " + std::to_string(h) + " listed twice");
  }
  for (const char* col : {"C-index", "Harrell"}) {
    if (!metric_mapping.count(col)) throw ValidationError(std::string("metric_mapping: missing column '") + col + "'");
  }
  if (metric_mapping.size() != 2) throw ValidationError("metric_mapping: only 'C-index' and 'Harrell' are columns");
  if (!(max_missing_fraction > 0.0 && max_missing_fraction <= 1.0)) {
    throw ValidationError("max_missing_fraction must lie in (0, 1]");
  }
  if (!(correlation_threshold > 0.0 && correlation_threshold <= 1.0)) {
    throw ValidationError("correlation_threshold must lie in (0, 1]");
  }
  if (mice_cycles < 1) throw ValidationError("mice_cycles must be >= 1");
  if (threads < 1) throw ValidationError("threads must be >= 1");
  if (!(roc_threshold >= 0.0 && roc_threshold <= 1.0)) throw ValidationError("roc_threshold must lie in [0, 1]");
  if (!params.is_object()) throw ValidationError("params must be an object keyed by algorithm");
  for (const auto& [k, v] : params.items()) {
    algorithm_label(k);
    if (!v.is_object()) throw ValidationError("params." + k + " must be an object");
  }
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json mapping = nlohmann::json::object();
  for (const auto& [k, v] : metric_mapping) mapping[k] = estimator_name(v);
  return {{"algorithms", algorithms},
          {"n_repeats", n_repeats},
          {"train_fraction", train_fraction},
          {"inner_train_fraction", inner_train_fraction},
          {"seed", seed},
          {"horizons", horizons},
          {"calibrated_algorithm", calibrated_algorithm},
          {"metric_mapping", mapping},
          {"max_missing_fraction", max_missing_fraction},
          {"correlation_threshold", correlation_threshold},
          {"mice_cycles", mice_cycles},
          {"leakage_canary", leakage_canary},
          {"threads", threads},
          {"roc_threshold", roc_threshold},
          {"clinical_horizon", clinical_horizon},
          {"params", params}};
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("experiment config must be a JSON object");
  check_keys(j,
             {"algorithms", "n_repeats", "train_fraction", "inner_train_fraction", "seed", "horizons",
              "calibrated_algorithm", "metric_mapping", "max_missing_fraction", "correlation_threshold", "mice_cycles",
              "leakage_canary", "threads", "roc_threshold", "clinical_horizon", "params"},
             "experiment config");
  ExperimentConfig c;
  try {
    take(j, "algorithms", c.algorithms);
    take(j, "n_repeats", c.n_repeats);
    take(j, "train_fraction", c.train_fraction);
    take(j, "inner_train_fraction", c.inner_train_fraction);
    take(j, "seed", c.seed);
    take(j, "horizons", c.horizons);
    take(j, "calibrated_algorithm", c.calibrated_algorithm);
    if (j.contains("metric_mapping")) {
      c.metric_mapping.clear();
      for (const auto& [k, v] : j.at("metric_mapping").items()) c.metric_mapping[k] = estimator_from_name(v.get<std::string>());
    }
    take(j, "max_missing_fraction", c.max_missing_fraction);
    take(j, "correlation_threshold", c.correlation_threshold);
    take(j, "mice_cycles", c.mice_cycles);
    take(j, "leakage_canary", c.leakage_canary);
    take(j, "threads", c.threads);
    take(j, "roc_threshold", c.roc_threshold);
    take(j, "clinical_horizon", c.clinical_horizon);
    if (j.contains("params")) c.params = j.at("params");
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("experiment config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string ExperimentConfig::hash() const { return sha256_hex(to_json().dump()); }

SimConfig protocol_scenario() {
  SimConfig c;
  c.n = 12000;
  c.interactions = {{"gender_male", "poor_eating_or_lack_of_appetite", 1.6},
                    {"mobilisation", "specific_health_conditions", 0.5},
                    {"age_value", "weight_loss", 0.12}};
  c.late_noise_sd = 1.5;
  c.late_noise_onset_days = 30;
  return c;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_split(const Outcomes& outcomes,
                                                                                double train_fraction,
                                                                                std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ValidationError("train_fraction must lie in (0, 1)");
  std::vector<std::size_t> strata[2];
  for (std::size_t i = 0; i < outcomes.size(); ++i) strata[outcomes[i].event ? 1 : 0].push_back(i);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> train, test;
  for (auto& s : strata) {
    std::shuffle(s.begin(), s.end(), rng);
    const auto k = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(s.size())));
    train.insert(train.end(), s.begin(), s.begin() + static_cast<std::ptrdiff_t>(k));
    test.insert(test.end(), s.begin() + static_cast<std::ptrdiff_t>(k), s.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {std::move(train), std::move(test)};
}

double AlgorithmFit::risk(const Eigen::MatrixXd& x, Eigen::Index row) const {
  return risk_score(model, row_of(x, row, columns));
}

std::vector<double> AlgorithmFit::risks(const Eigen::MatrixXd& x) const {
  std::vector<double> out(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index i = 0; i < x.rows(); ++i) out[static_cast<std::size_t>(i)] = risk(x, i);
  return out;
}

AlgorithmFit fit_algorithm(const std::string& algorithm, const Eigen::MatrixXd& x, OutcomeSpan outcomes,
                           const std::vector<std::string>& feature_names, std::uint64_t seed,
                           const nlohmann::json& params) {
  algorithm_label(algorithm);
  if (static_cast<std::size_t>(x.cols()) != feature_names.size()) {
    throw ValidationError("fit_algorithm: feature names do not match the matrix");
  }
  std::vector<std::size_t> all(feature_names.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  if (algorithm == "gb" || algorithm == "xgb") {
    return {fit_gbcox(x, outcomes, feature_names, boost_params(algorithm, params, seed)), all};
  }
  if (algorithm == "rf") return {fit_rsf(x, outcomes, feature_names, forest_params(params, seed)), all};

  std::vector<std::size_t> cols;
  for (std::size_t j = 0; j < all.size(); ++j) {
    const auto c = x.col(static_cast<Eigen::Index>(j));
    if (c.maxCoeff() > c.minCoeff()) cols.push_back(j);
  }
  if (cols.empty()) throw ValidationError(algorithm + ": every training column is constant");
  Eigen::MatrixXd xs(x.rows(), static_cast<Eigen::Index>(cols.size()));
  std::vector<std::string> names;
  for (std::size_t k = 0; k < cols.size(); ++k) {
    xs.col(static_cast<Eigen::Index>(k)) = x.col(static_cast<Eigen::Index>(cols[k]));
    names.push_back(feature_names[cols[k]]);
  }
  if (algorithm == "coxph") return {fit_coxph(xs, outcomes, names, cox_options(params)), cols};
  return {fit_penalized_cox(xs, outcomes, names, penalty_params(algorithm, params)), cols};
}

FeatureUsage feature_usage(const AlgorithmFit& fit, std::size_t column, const Eigen::MatrixXd& x) {
  FeatureUsage u;
  auto local = std::find(fit.columns.begin(), fit.columns.end(), column);
  if (local == fit.columns.end()) return u;
  const auto idx = static_cast<std::size_t>(local - fit.columns.begin());
  const auto f = static_cast<std::int32_t>(idx);
  auto count = [&](const RegressionTree& t) {
    for (const auto& n : t.nodes) u.splits += n.feature == f ? 1 : 0;
  };
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const auto row = row_of(x, i, fit.columns);
    if (const auto* m = std::get_if<CoxModel>(&fit.model)) {
      u.shap_mass += std::abs(linear_shap(*m, row).contributions[idx]);
    } else if (const auto* b = std::get_if<BoostedCoxModel>(&fit.model)) {
      u.shap_mass += std::abs(tree_shap(*b, row).contributions[idx]);
    } else {
      const auto& rf = std::get<SurvivalForestModel>(fit.model);
      std::vector<double> phi(fit.columns.size(), 0.0);
      for (const auto& t : rf.trees) tree_shap(t.tree, row, phi);
      u.shap_mass += std::abs(phi[idx] / static_cast<double>(rf.trees.size()));
    }
  }
  if (const auto* b = std::get_if<BoostedCoxModel>(&fit.model)) {
    for (const auto& t : b->trees) count(t);
  } else if (const auto* rf = std::get_if<SurvivalForestModel>(&fit.model)) {
    for (const auto& t : rf->trees) count(t.tree);
  }
  return u;
}

std::string cohort_hash(const Cohort& cohort) {
  std::string s;
  char buf[64];
  for (const auto& n : cohort.feature_names()) s += n + ',';
  s += '\n';
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    for (const auto& v : cohort.records()[i].values) {
      if (v) {
        std::snprintf(buf, sizeof buf, "%.17g,", *v);
        s += buf;
      } else {
        s += "NA,";
      }
    }
    const auto& o = cohort.outcomes()[i];
    std::snprintf(buf, sizeof buf, "%d,%d\n", o.time_days, o.event ? 1 : 0);
    s += buf;
  }
  return sha256_hex(s);
}

ExperimentReport run_experiments(const Cohort& cohort, const ExperimentConfig& config) {
  config.validate();
  if (cohort.size() == 0) throw ValidationError("run_experiments: empty cohort");

  std::vector<RepeatResult> results(static_cast<std::size_t>(config.n_repeats));
  std::atomic<int> next{0};
  auto worker = [&] {
    for (int r = next++; r < config.n_repeats; r = next++) {
      auto& slot = results[static_cast<std::size_t>(r)];
      try {
        slot = run_repeat(cohort, config, r);
      } catch (const std::exception& e) {
        slot = failed_repeat(config, r, std::string("repeat preparation failed: ") + e.what());
      }
    }
  };
  const int n_threads = std::min(config.threads, config.n_repeats);
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  ExperimentReport rep;
  rep.config = config.to_json();
  rep.config_hash = config.hash();
  rep.data_hash = cohort_hash(cohort);
  rep.seed = config.seed;
  rep.n_rows = cohort.size();
  rep.cohort_event_fraction = cohort.event_fraction();
  rep.calibrated_algorithm = config.calibrated_algorithm;

  for (const auto& alg : config.algorithms) {
    rep.discrimination.push_back(aggregate_row(
        alg, algorithm_label(alg), kDiscriminationMetrics, std::size(kDiscriminationMetrics), results,
        [&](const RepeatResult& r) -> const CellResult* { return &r.algorithms.at(alg); }));
  }
  if (!config.calibrated_algorithm.empty()) {
    for (int h : config.horizons) {
      rep.horizons.push_back(aggregate_row(
          std::to_string(h), horizon_label(h), kHorizonMetrics, std::size(kHorizonMetrics), results,
          [&](const RepeatResult& r) -> const CellResult* {
            auto it = r.horizons.find(h);
            return it == r.horizons.end() ? nullptr : &it->second;
          }));
    }
  }
  for (auto& r : results) rep.repeats.push_back(std::move(r.diagnostics));

  rep.clinical.horizon_days = config.clinical_horizon;
  rep.clinical.threshold = config.roc_threshold;
  std::vector<double> probs;
  std::vector<int> labels;
  for (const auto& r : results) {
    auto p = r.horizon_probs.find(config.clinical_horizon);
    if (p == r.horizon_probs.end()) continue;
    const auto& l = r.horizon_labels.at(config.clinical_horizon);
    probs.insert(probs.end(), p->second.begin(), p->second.end());
    labels.insert(labels.end(), l.begin(), l.end());
  }
  if (!probs.empty()) {
    rep.clinical.pooled_confusion = confusion_at(probs, labels, config.roc_threshold);
    rep.clinical.pooled_calibration = calibration_curve(probs, labels);
  }
  return rep;
}

}  // namespace caresurv
