#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <numeric>

#include <CLI11.hpp>

#include "caresurv/harness.hpp"
#include "caresurv/serve.hpp"
#include "caresurv/util.hpp"

using namespace caresurv;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string runs_dir = "runs";
};

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + " is not valid JSON: " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

nlohmann::json config_section(const Common& c, const char* section) {
  if (c.config_path.empty()) return nlohmann::json::object();
  const auto j = read_json(c.config_path);
  return j.value(section, nlohmann::json::object());
}

std::uint64_t resolve_seed(const Common& c, const nlohmann::json& section, std::uint64_t fallback) {
  if (c.seed) return *c.seed;
  if (const char* env = std::getenv("CARESURV_SEED")) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw ValidationError(std::string("CARESURV_SEED is not an unsigned integer: ") + env);
    }
  }
  return section.value("seed", fallback);
}

// Outputs go under <runs>/<command>-<first 12 hex of the config hash>.
fs::path run_dir(const Common& c, const std::string& command, const nlohmann::json& effective) {
  const auto hash = sha256_hex(effective.dump());
  const fs::path dir = fs::path(c.runs_dir) / (command + "-" + hash.substr(0, 12));
  fs::create_directories(dir);
  write_text(dir / "config.json", effective.dump(2) + "\n");
  return dir;
}

Cohort load_cohort(const std::string& path) {
  const auto r = ingest_csv(path);
  for (const auto& e : r.errors) std::cerr << path << ":" << e.line << ": skipped row: " << e.message << "\n";
  if (r.rejected_nonpositive_time) std::cerr << r.rejected_nonpositive_time << " rows rejected for time <= 0\n";
  return r.cohort;
}

Cohort align_to_bundle(const Cohort& cohort, const ModelBundle& b) {
  std::vector<std::size_t> cols;
  const auto names = cohort.feature_names();
  for (const auto& f : b.features) {
    auto it = std::find(names.begin(), names.end(), f.name);
    if (it == names.end()) throw ValidationError("data lacks model feature '" + f.name + "'");
    cols.push_back(static_cast<std::size_t>(it - names.begin()));
  }
  Cohort aligned = cohort.select_features(cols);
  if (!aligned.complete()) {
    if (!b.imputation) throw ValidationError("data has missing values and the bundle has no imputation models");
    aligned = b.imputation->apply(aligned);
  }
  return aligned;
}

std::vector<double> row_of(const Eigen::MatrixXd& x, Eigen::Index i) {
  std::vector<double> r(static_cast<std::size_t>(x.cols()));
  for (Eigen::Index j = 0; j < x.cols(); ++j) r[static_cast<std::size_t>(j)] = x(i, j);
  return r;
}

int cmd_simulate(const Common& c, const std::string& scenario, std::optional<std::size_t> n) {
  auto section = config_section(c, "simulation");
  SimConfig cfg = scenario == "protocol" ? protocol_scenario() : SimConfig{};
  nlohmann::json base = to_json(cfg);
  for (const auto& [k, v] : section.items()) {
    if (k != "seed") base[k] = v;
  }
  cfg = sim_config_from_json(base);
  if (n) cfg.n = *n;
  const auto seed = resolve_seed(c, section, 1);
  const nlohmann::json effective{{"command", "simulate"}, {"simulation", to_json(cfg)}, {"seed", seed}};
  const auto dir = run_dir(c, "simulate", effective);
  const auto sim = simulate_cohort(cfg, seed);
  write_csv(sim.cohort, dir / "cohort.csv");
  write_text(dir / "truth.json", nlohmann::json{{"coefficients", sim.truth.coefficients},
                                                {"centers", sim.truth.centers},
                                                {"feature_names", sim.cohort.feature_names()},
                                                {"achieved_event_fraction", sim.achieved_event_fraction}}
                                     .dump(2) +
                                     "\n");
  std::cout << (dir / "cohort.csv").string() << "\n";
  return 0;
}

int cmd_train(const Common& c, const std::string& data) {
  auto section = config_section(c, "train");
  TrainOptions o;
  o.algorithm = section.value("algorithm", o.algorithm);
  o.horizons = section.value("horizons", o.horizons);
  o.inner_train_fraction = section.value("inner_train_fraction", o.inner_train_fraction);
  o.max_missing_fraction = section.value("max_missing_fraction", o.max_missing_fraction);
  o.correlation_threshold = section.value("correlation_threshold", o.correlation_threshold);
  o.mice_cycles = section.value("mice_cycles", o.mice_cycles);
  o.params = section.value("params", nlohmann::json::object());
  o.seed = resolve_seed(c, section, 1);
  const Cohort cohort = load_cohort(data);
  nlohmann::json effective{{"command", "train"},
                           {"algorithm", o.algorithm},
                           {"horizons", o.horizons},
                           {"inner_train_fraction", o.inner_train_fraction},
                           {"max_missing_fraction", o.max_missing_fraction},
                           {"correlation_threshold", o.correlation_threshold},
                           {"mice_cycles", o.mice_cycles},
                           {"params", o.params},
                           {"seed", o.seed},
                           {"data_hash", cohort_hash(cohort)}};
  o.config_hash = sha256_hex(effective.dump());
  const auto dir = run_dir(c, "train", effective);
  const auto bundle = train_bundle(cohort, o);
  save_bundle(bundle, dir / "model.bundle");
  std::cout << (dir / "model.bundle").string() << "\n";
  return 0;
}

int cmd_evaluate(const Common& c, const std::string& data) {
  auto section = config_section(c, "experiment");
  section["seed"] = resolve_seed(c, section, ExperimentConfig{}.seed);
  const auto config = ExperimentConfig::from_json(section);
  const Cohort cohort = load_cohort(data);
  const nlohmann::json effective{{"command", "evaluate"}, {"experiment", config.to_json()}, {"data_hash", cohort_hash(cohort)}};
  const auto dir = run_dir(c, "evaluate", effective);
  const auto report = run_experiments(cohort, config);
  export_report(report, ReportFormat::kJson, dir / "report.json");
  export_report(report, ReportFormat::kCsv, dir / "report.csv");
  export_report(report, ReportFormat::kMarkdown, dir / "report.md");
  std::cout << render_report(report, ReportFormat::kMarkdown);
  std::cout << "\n" << (dir / "report.json").string() << "\n";
  return 0;
}

int cmd_calibrate(const Common& c, const std::string& bundle_path, const std::string& data, int bins) {
  const auto bundle = load_bundle(bundle_path);
  const Cohort cohort = align_to_bundle(load_cohort(data), bundle);
  const auto section = config_section(c, "calibrate");
  const double threshold = section.value("roc_threshold", 0.2);
  const nlohmann::json effective{{"command", "calibrate"},
                                 {"bundle", bundle_id(bundle)},
                                 {"data_hash", cohort_hash(cohort)},
                                 {"bins", bins},
                                 {"roc_threshold", threshold}};
  const auto dir = run_dir(c, "calibrate", effective);
  const Eigen::MatrixXd x = cohort.matrix();
  std::vector<double> scores;
  for (Eigen::Index i = 0; i < x.rows(); ++i) scores.push_back(risk_score(bundle.model, row_of(x, i)));
  nlohmann::json out = nlohmann::json::array();
  for (const auto& s : bundle.scalers) {
    const auto labels = binarize_at_horizon(cohort.outcomes(), s.horizon_days);
    std::vector<double> probs;
    std::vector<int> y;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (!labels.included[i]) continue;
      probs.push_back(s.predict(scores[i]));
      y.push_back(labels.labels[i]);
    }
    const auto curve = calibration_curve(probs, y, bins);
    curve.write_csv(dir / ("calibration_" + std::to_string(s.horizon_days) + ".csv"));
    const auto refit = logistic_recalibration(probs, y);
    out.push_back({{"horizon_days", s.horizon_days},
                   {"scaler", s.to_json()},
                   {"excluded", labels.excluded},
                   {"curve", curve.to_json()},
                   {"recalibration", {{"intercept", refit.intercept}, {"slope", refit.slope}, {"converged", refit.converged}}},
                   {"roc", to_json(roc_with_clinical_metrics(probs, y))},
                   {"at_threshold", to_json(confusion_at(probs, y, threshold))}});
  }
  write_text(dir / "calibration.json", out.dump(2) + "\n");
  std::cout << (dir / "calibration.json").string() << "\n";
  return 0;
}

int cmd_explain(const Common& c, const std::string& bundle_path, const std::string& data, std::size_t row,
                std::size_t top_k, std::size_t max_rows, const std::vector<std::string>& features) {
  const auto bundle = load_bundle(bundle_path);
  const Cohort cohort = align_to_bundle(load_cohort(data), bundle);
  const nlohmann::json effective{{"command", "explain"}, {"bundle", bundle_id(bundle)}, {"data_hash", cohort_hash(cohort)},
                                 {"row", row}, {"top_k", top_k}, {"max_rows", max_rows}, {"features", features}};
  const auto dir = run_dir(c, "explain", effective);
  const Eigen::MatrixXd x = cohort.matrix();
  if (row >= static_cast<std::size_t>(x.rows())) throw ValidationError("row " + std::to_string(row) + " is out of range");
  const auto n = std::min<Eigen::Index>(x.rows(), static_cast<Eigen::Index>(max_rows));

  ShapSummary summary;
  summary.feature_names = model_feature_names(bundle.model);
  summary.values = x.topRows(n);
  summary.shap = Eigen::MatrixXd::Zero(n, x.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto e = explain_any(bundle.model, row_of(x, i));
    summary.base_value = e.base_value;
    for (Eigen::Index j = 0; j < x.cols(); ++j) summary.shap(i, j) = e.contributions[static_cast<std::size_t>(j)];
  }
  for (Eigen::Index j = 0; j < x.cols(); ++j) summary.mean_abs.push_back(summary.shap.col(j).cwiseAbs().mean());
  summary.ranking.resize(summary.mean_abs.size());
  std::iota(summary.ranking.begin(), summary.ranking.end(), std::size_t{0});
  std::stable_sort(summary.ranking.begin(), summary.ranking.end(),
                   [&](auto a, auto b) { return summary.mean_abs[a] > summary.mean_abs[b]; });
  write_text(dir / "shap_summary.json", summary.to_json().dump(2) + "\n");

  auto chosen = features;
  if (chosen.empty()) {
    for (std::size_t k = 0; k < std::min<std::size_t>(3, summary.ranking.size()); ++k) {
      chosen.push_back(summary.feature_names[summary.ranking[k]]);
    }
  }
  for (const auto& f : chosen) {
    write_text(dir / ("dependence_" + f + ".json"), shap_dependence(summary, f).to_json().dump(2) + "\n");
  }
  const auto r = row_of(x, static_cast<Eigen::Index>(row));
  const auto e = explain_any(bundle.model, r);
  write_text(dir / ("waterfall_row" + std::to_string(row) + ".json"), waterfall_data(e, top_k).to_json().dump(2) + "\n");
  const auto overlay = survival_overlay(bundle.model, r, x, bundle.cohort_baseline.times);
  write_text(dir / ("overlay_row" + std::to_string(row) + ".json"), overlay.to_json().dump(2) + "\n");
  std::cout << dir.string() << "\n";
  return 0;
}

HttpServer* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->stop();
}

int cmd_serve(const std::string& bundle_path, const std::string& host, int port) {
  PredictionService service(std::make_shared<const ModelBundle>(load_bundle(bundle_path)));
  HttpServer server(service);
  const int bound = server.bind(host, port);
  g_server = &server;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::cout << "serving " << bundle_path << " on http://" << host << ":" << bound << std::endl;
  server.listen();
  g_server = nullptr;
  return 0;
}

int cmd_report(const std::string& input, const std::string& format, const std::string& out) {
  const auto report = load_report(input);
  const auto f = report_format_from_string(format);
  if (out.empty()) {
    std::cout << render_report(report, f);
  } else {
    export_report(report, f, out);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Survival modelling toolkit for residential aged care cohorts"};
  app.require_subcommand(1);
  Common common;
  std::uint64_t seed_value = 0;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "JSON configuration file")->check(CLI::ExistingFile);
    sub->add_option("--seed", seed_value, "Master seed (overrides CARESURV_SEED and the config file)");
    sub->add_option("--runs-dir", common.runs_dir, "Directory that holds run directories");
  };

  std::string scenario = "default";
  std::size_t sim_n = 0;
  auto* simulate = app.add_subcommand("simulate", "Draw a synthetic cohort with known hazards");
  add_common(simulate);
  simulate->add_option("--scenario", scenario, "default or protocol")->check(CLI::IsMember({"default", "protocol"}));
  simulate->add_option("--n", sim_n, "Number of residents");

  std::string data;
  auto* train = app.add_subcommand("train", "Fit a model and write a bundle");
  add_common(train);
  train->add_option("--data", data, "Cohort CSV")->required()->check(CLI::ExistingFile);

  auto* evaluate = app.add_subcommand("evaluate", "Run the repeated-split experiment protocol");
  add_common(evaluate);
  evaluate->add_option("--data", data, "Cohort CSV")->required()->check(CLI::ExistingFile);

  std::string bundle;
  int bins = 10;
  auto* calibrate = app.add_subcommand("calibrate", "Assess a bundle's horizon calibration on held-out data");
  add_common(calibrate);
  calibrate->add_option("--bundle", bundle, "Model bundle")->required()->check(CLI::ExistingFile);
  calibrate->add_option("--data", data, "Held-out cohort CSV")->required()->check(CLI::ExistingFile);
  calibrate->add_option("--bins", bins, "Calibration bins")->check(CLI::PositiveNumber);

  std::size_t row = 0, top_k = 10, max_rows = 500;
  std::vector<std::string> features;
  auto* explain = app.add_subcommand("explain", "Emit SHAP summary, dependence, waterfall and overlay data");
  add_common(explain);
  explain->add_option("--bundle", bundle, "Model bundle")->required()->check(CLI::ExistingFile);
  explain->add_option("--data", data, "Cohort CSV")->required()->check(CLI::ExistingFile);
  explain->add_option("--row", row, "Row explained by the waterfall and overlay");
  explain->add_option("--top-k", top_k, "Waterfall entries before collapsing")->check(CLI::PositiveNumber);
  explain->add_option("--max-rows", max_rows, "Rows used for the summary");
  explain->add_option("--feature", features, "Features for dependence data (default: top three)");

  std::string host = "127.0.0.1";
  int port = 8080;
  auto* serve = app.add_subcommand("serve", "Serve a bundle over HTTP");
  serve->add_option("--bundle", bundle, "Model bundle")->required()->check(CLI::ExistingFile);
  serve->add_option("--port", port, "TCP port (0 picks a free port)");
  serve->add_option("--host", host, "Bind address");

  std::string input, format = "markdown", out;
  auto* report = app.add_subcommand("report", "Render a saved experiment report");
  report->add_option("--input", input, "report.json")->required()->check(CLI::ExistingFile);
  report->add_option("--format", format, "json, csv or markdown");
  report->add_option("--out", out, "Output path (default: stdout)");

  CLI11_PARSE(app, argc, argv);
  for (auto* sub : {simulate, train, evaluate, calibrate, explain}) {
    if (sub->parsed() && sub->count("--seed")) common.seed = seed_value;
  }

  try {
    if (simulate->parsed()) return cmd_simulate(common, scenario, sim_n ? std::optional<std::size_t>(sim_n) : std::nullopt);
    if (train->parsed()) return cmd_train(common, data);
    if (evaluate->parsed()) return cmd_evaluate(common, data);
    if (calibrate->parsed()) return cmd_calibrate(common, bundle, data, bins);
    if (explain->parsed()) return cmd_explain(common, bundle, data, row, top_k, max_rows, features);
    if (serve->parsed()) return cmd_serve(bundle, host, port);
    if (report->parsed()) return cmd_report(input, format, out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
