#include <algorithm>
#include <fstream>
#include <sstream>

#include "caresurv/harness.hpp"

namespace caresurv {

namespace {

std::optional<double> optional_double(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

MetricValue metric_from_json(const nlohmann::json& j) {
  MetricValue m;
  m.name = j.at("name").get<std::string>();
  m.point = j.at("point").get<double>();
  m.low = j.at("low").get<double>();
  m.high = j.at("high").get<double>();
  m.n_repeats = j.at("n_repeats").get<std::size_t>();
  return m;
}

nlohmann::json row_to_json(const ReportRow& row) {
  nlohmann::json metrics = nlohmann::json::object();
  for (const auto& [k, v] : row.metrics) metrics[k] = to_json(v);
  nlohmann::json values = nlohmann::json::object();
  for (const auto& [k, v] : row.values) values[k] = v;
  nlohmann::json failures = nlohmann::json::array();
  for (const auto& f : row.failures) failures.push_back({{"repeat", f.repeat}, {"message", f.message}});
  return {{"key", row.key},         {"label", row.label},   {"metric_names", row.metric_names},
          {"metrics", metrics},     {"values", values},     {"failures", failures}};
}

ReportRow row_from_json(const nlohmann::json& j) {
  ReportRow row;
  row.key = j.at("key").get<std::string>();
  row.label = j.at("label").get<std::string>();
  row.metric_names = j.at("metric_names").get<std::vector<std::string>>();
  for (const auto& [k, v] : j.at("metrics").items()) row.metrics[k] = metric_from_json(v);
  for (const auto& [k, v] : j.at("values").items()) row.values[k] = v.get<std::vector<double>>();
  for (const auto& f : j.at("failures")) row.failures.push_back({f.at("repeat").get<int>(), f.at("message").get<std::string>()});
  return row;
}

RocPoint roc_point_from_json(const nlohmann::json& j) {
  RocPoint p;
  p.threshold = j.at("threshold").get<double>();
  p.tpr = j.at("tpr").get<double>();
  p.fpr = j.at("fpr").get<double>();
  p.tnr = j.at("tnr").get<double>();
  p.tp = j.at("tp").get<std::size_t>();
  p.fp = j.at("fp").get<std::size_t>();
  p.tn = j.at("tn").get<std::size_t>();
  p.fn = j.at("fn").get<std::size_t>();
  p.npv = optional_double(j.at("npv"));
  p.ppv = optional_double(j.at("ppv"));
  return p;
}

CalibrationCurve calibration_from_json(const nlohmann::json& j) {
  CalibrationCurve c;
  c.edges = j.at("edges").get<std::vector<double>>();
  c.histogram = j.at("histogram").get<std::vector<std::size_t>>();
  for (const auto& b : j.at("bins")) {
    c.counts.push_back(b.at("count").get<std::size_t>());
    c.empty.push_back(b.at("empty").get<bool>());
    c.mean_predicted.push_back(optional_double(b.at("mean_predicted")).value_or(0.0));
    c.observed_fraction.push_back(optional_double(b.at("observed_fraction")).value_or(0.0));
  }
  return c;
}

std::string cell(const ReportRow& row, const std::string& metric) {
  auto it = row.metrics.find(metric);
  return it == row.metrics.end() ? "n/a" : format_metric(it->second);
}

std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

void markdown_table(std::ostringstream& out, const std::string& first_column, const std::vector<std::string>& metrics,
                    const std::vector<const ReportRow*>& rows) {
  out << "| " << first_column;
  for (const auto& m : metrics) out << " | " << m;
  out << " |\n|---";
  for (std::size_t k = 0; k < metrics.size(); ++k) out << "|---";
  out << "|\n";
  for (const auto* r : rows) {
    out << "| " << r->label;
    for (const auto& m : metrics) out << " | " << cell(*r, m);
    out << " |\n";
  }
  for (const auto* r : rows) {
    for (const auto& f : r->failures) out << "\n" << r->label << " failed in repeat " << f.repeat << ": " << f.message << "\n";
  }
}

std::string render_markdown(const ExperimentReport& rep) {
  std::ostringstream out;
  out << "# Experiment report\n\n";
  out << "- seed: " << rep.seed << "\n- config hash: " << rep.config_hash << "\n- data hash: " << rep.data_hash
      << "\n- rows: " << rep.n_rows << "\n- repeats: " << rep.repeats.size() << "\n\n";

  out << "## Discrimination by algorithm\n\n";
  std::vector<const ReportRow*> rows;
  for (const auto& r : rep.discrimination) rows.push_back(&r);
  std::stable_sort(rows.begin(), rows.end(), [](const ReportRow* a, const ReportRow* b) {
    auto ia = a->metrics.find("C-index");
    auto ib = b->metrics.find("C-index");
    if (ia == a->metrics.end()) return false;
    if (ib == b->metrics.end()) return true;
    return ia->second.point > ib->second.point;
  });
  markdown_table(out, "Algorithm", {"C-index", "Harrell", "AUROC"}, rows);

  out << "\n## Calibrated forecasts by horizon";
  if (!rep.calibrated_algorithm.empty()) out << " (" << algorithm_label(rep.calibrated_algorithm) << ")";
  out << "\n\n";
  rows.clear();
  for (const auto& r : rep.horizons) rows.push_back(&r);
  markdown_table(out, "Horizon", {"Dynamic AUROC", "IBS", "C-index", "Harrell"}, rows);

  if (rep.clinical.pooled_confusion) {
    const auto& p = *rep.clinical.pooled_confusion;
    char buf[256];
    std::snprintf(buf, sizeof buf, "\n## Threshold %.2f at %d days (pooled test folds)\n\nTPR %.3f, FPR %.3f, TNR %.3f",
                  p.threshold, rep.clinical.horizon_days, p.tpr, p.fpr, p.tnr);
    out << buf;
    if (p.npv) {
      std::snprintf(buf, sizeof buf, ", NPV %.3f", *p.npv);
      out << buf;
    }
    if (p.ppv) {
      std::snprintf(buf, sizeof buf, ", PPV %.3f", *p.ppv);
      out << buf;
    }
    out << "\n";
  }
  return out.str();
}

std::string render_csv(const ExperimentReport& rep) {
  std::ostringstream out;
  out.precision(17);
  out << "table,key,label,metric,point,low,high,n_repeats,cell\n";
  auto emit = [&](const char* table, const std::vector<ReportRow>& rows) {
    for (const auto& r : rows) {
      for (const auto& m : r.metric_names) {
        out << table << ',' << csv_quote(r.key) << ',' << csv_quote(r.label) << ',' << csv_quote(m) << ',';
        auto it = r.metrics.find(m);
        if (it == r.metrics.end()) {
          out << ",,,0,n/a\n";
        } else {
          out << it->second.point << ',' << it->second.low << ',' << it->second.high << ',' << it->second.n_repeats
              << ',' << format_metric(it->second) << '\n';
        }
      }
    }
  };
  emit("discrimination", rep.discrimination);
  emit("horizon", rep.horizons);
  return out.str();
}

}  // namespace

const ReportRow* ExperimentReport::discrimination_row(const std::string& algorithm) const {
  for (const auto& r : discrimination) {
    if (r.key == algorithm) return &r;
  }
  return nullptr;
}

nlohmann::json ExperimentReport::to_json() const {
  nlohmann::json j;
  j["format"] = "caresurv.experiment_report";
  j["schema_version"] = schema_version;
  j["provenance"] = {{"seed", seed},
                     {"config_hash", config_hash},
                     {"data_hash", data_hash},
                     {"n_rows", n_rows},
                     {"cohort_event_fraction", cohort_event_fraction},
                     {"config", config}};
  auto& d = j["discrimination"] = nlohmann::json::array();
  for (const auto& r : discrimination) d.push_back(row_to_json(r));
  j["calibrated_algorithm"] = calibrated_algorithm;
  auto& h = j["horizons"] = nlohmann::json::array();
  for (const auto& r : horizons) h.push_back(row_to_json(r));
  auto& reps = j["repeats"] = nlohmann::json::array();
  for (const auto& r : repeats) {
    nlohmann::json canary = nlohmann::json::object();
    for (const auto& [k, u] : r.canary) canary[k] = {{"splits", u.splits}, {"shap_mass", u.shap_mass}};
    reps.push_back({{"repeat", r.repeat},
                    {"seed", r.seed},
                    {"n_train", r.n_train},
                    {"n_test", r.n_test},
                    {"test_event_fraction", r.test_event_fraction},
                    {"dropped_sparse", r.dropped_sparse},
                    {"dropped_correlated", r.dropped_correlated},
                    {"canary", canary}});
  }
  j["clinical"] = {{"horizon_days", clinical.horizon_days},
                   {"threshold", clinical.threshold},
                   {"pooled_confusion", clinical.pooled_confusion ? caresurv::to_json(*clinical.pooled_confusion) : nlohmann::json(nullptr)},
                   {"pooled_calibration",
                    clinical.pooled_calibration ? clinical.pooled_calibration->to_json() : nlohmann::json(nullptr)}};
  return j;
}

ExperimentReport ExperimentReport::from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "caresurv.experiment_report") {
      throw FormatError("not an experiment report");
    }
    const int version = j.at("schema_version").get<int>();
    if (version != kReportSchemaVersion) {
      throw FormatError("report schema version " + std::to_string(version) + " is not supported (expected " +
                        std::to_string(kReportSchemaVersion) + ")");
    }
    ExperimentReport rep;
    rep.schema_version = version;
    const auto& p = j.at("provenance");
    rep.seed = p.at("seed").get<std::uint64_t>();
    rep.config_hash = p.at("config_hash").get<std::string>();
    rep.data_hash = p.at("data_hash").get<std::string>();
    rep.n_rows = p.at("n_rows").get<std::size_t>();
    rep.cohort_event_fraction = p.at("cohort_event_fraction").get<double>();
    rep.config = p.at("config");
    for (const auto& r : j.at("discrimination")) rep.discrimination.push_back(row_from_json(r));
    rep.calibrated_algorithm = j.at("calibrated_algorithm").get<std::string>();
    for (const auto& r : j.at("horizons")) rep.horizons.push_back(row_from_json(r));
    for (const auto& r : j.at("repeats")) {
      RepeatDiagnostics d;
      d.repeat = r.at("repeat").get<int>();
      d.seed = r.at("seed").get<std::uint64_t>();
      d.n_train = r.at("n_train").get<std::size_t>();
      d.n_test = r.at("n_test").get<std::size_t>();
      d.test_event_fraction = r.at("test_event_fraction").get<double>();
      d.dropped_sparse = r.at("dropped_sparse").get<std::vector<std::string>>();
      d.dropped_correlated = r.at("dropped_correlated").get<std::vector<std::string>>();
      for (const auto& [k, u] : r.at("canary").items()) {
        d.canary[k] = {u.at("splits").get<std::size_t>(), u.at("shap_mass").get<double>()};
      }
      rep.repeats.push_back(std::move(d));
    }
    const auto& c = j.at("clinical");
    rep.clinical.horizon_days = c.at("horizon_days").get<int>();
    rep.clinical.threshold = c.at("threshold").get<double>();
    if (!c.at("pooled_confusion").is_null()) rep.clinical.pooled_confusion = roc_point_from_json(c.at("pooled_confusion"));
    if (!c.at("pooled_calibration").is_null()) {
      rep.clinical.pooled_calibration = calibration_from_json(c.at("pooled_calibration"));
    }
    return rep;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed experiment report: ") + e.what());
  }
}

ReportFormat report_format_from_string(const std::string& name) {
  if (name == "json") return ReportFormat::kJson;
  if (name == "csv") return ReportFormat::kCsv;
  if (name == "markdown" || name == "md") return ReportFormat::kMarkdown;
  throw ValidationError("unknown report format '" + name + "' (expected json, csv or markdown)");
}

std::string render_report(const ExperimentReport& report, ReportFormat format) {
  switch (format) {
    case ReportFormat::kJson:
      return report.to_json().dump(2) + "\n";
    case ReportFormat::kCsv:
      return render_csv(report);
    case ReportFormat::kMarkdown:
      return render_markdown(report);
  }
  return {};
}

void export_report(const ExperimentReport& report, ReportFormat format, const std::filesystem::path& path) {
  const std::string text = render_report(report, format);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write report to " + path.string());
  out << text;
  out.flush();
  if (!out) throw std::runtime_error("failed writing report to " + path.string());
}

ExperimentReport load_report(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read report " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("report " + path.string() + " is not valid JSON: " + e.what());
  }
  return ExperimentReport::from_json(j);
}

}  // namespace caresurv
