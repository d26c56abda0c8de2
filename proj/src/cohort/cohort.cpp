#include <algorithm>
#include <map>

#include "caresurv/cohort.hpp"
#include "caresurv/util.hpp"

namespace caresurv {

bool ResidentRecord::complete() const {
  return std::all_of(values.begin(), values.end(), [](const auto& v) { return v.has_value(); });
}

std::size_t ResidentRecord::missing_count() const {
  return static_cast<std::size_t>(std::count_if(values.begin(), values.end(), [](const auto& v) { return !v; }));
}

Cohort::Cohort(std::vector<FeatureSpec> features, std::vector<ResidentRecord> records, Outcomes outcomes)
    : features_(std::move(features)), records_(std::move(records)), outcomes_(std::move(outcomes)) {
  if (records_.size() != outcomes_.size()) {
    throw ValidationError("cohort has " + std::to_string(records_.size()) + " records but " +
                          std::to_string(outcomes_.size()) + " outcomes");
  }
  const std::size_t p = features_.size();
  std::vector<std::size_t> missing(p, 0);
  for (std::size_t i = 0; i < records_.size(); ++i) {
    const auto& rec = records_[i];
    if (rec.values.size() != p) {
      throw ValidationError("record " + std::to_string(i) + " has " + std::to_string(rec.values.size()) +
                            " fields, schema has " + std::to_string(p));
    }
    for (std::size_t j = 0; j < p; ++j) {
      if (!rec.values[j]) {
        ++missing[j];
      } else if (!features_[j].admits(*rec.values[j])) {
        throw ValidationError("record " + std::to_string(i) + ": " + features_[j].name + " value " +
                              std::to_string(*rec.values[j]) + " out of range");
      }
    }
    validate(outcomes_[i]);
  }
  missing_rates_.resize(p, 0.0);
  if (!records_.empty()) {
    for (std::size_t j = 0; j < p; ++j) {
      missing_rates_[j] = static_cast<double>(missing[j]) / static_cast<double>(records_.size());
    }
  }
}

std::vector<std::string> Cohort::feature_names() const {
  std::vector<std::string> names;
  names.reserve(features_.size());
  for (const auto& f : features_) names.push_back(f.name);
  return names;
}

double Cohort::event_fraction() const {
  if (outcomes_.empty()) return 0.0;
  const auto events = std::count_if(outcomes_.begin(), outcomes_.end(), [](const auto& o) { return o.event; });
  return static_cast<double>(events) / static_cast<double>(outcomes_.size());
}

bool Cohort::complete() const {
  return std::all_of(missing_rates_.begin(), missing_rates_.end(), [](double r) { return r == 0.0; });
}

Eigen::MatrixXd Cohort::matrix() const {
  Eigen::MatrixXd x(static_cast<Eigen::Index>(size()), static_cast<Eigen::Index>(num_features()));
  for (std::size_t i = 0; i < size(); ++i) {
    for (std::size_t j = 0; j < num_features(); ++j) {
      const auto& v = records_[i].values[j];
      if (!v) throw ValidationError("missing value for " + features_[j].name + " in row " + std::to_string(i));
      x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = *v;
    }
  }
  return x;
}

Cohort Cohort::select_rows(std::span<const std::size_t> rows) const {
  std::vector<ResidentRecord> recs;
  Outcomes outs;
  recs.reserve(rows.size());
  outs.reserve(rows.size());
  for (auto r : rows) {
    recs.push_back(records_.at(r));
    outs.push_back(outcomes_.at(r));
  }
  return Cohort(features_, std::move(recs), std::move(outs));
}

Cohort Cohort::select_features(std::span<const std::size_t> columns) const {
  std::vector<FeatureSpec> feats;
  for (auto c : columns) feats.push_back(features_.at(c));
  std::vector<ResidentRecord> recs(records_.size());
  for (std::size_t i = 0; i < records_.size(); ++i) {
    recs[i].values.reserve(columns.size());
    for (auto c : columns) recs[i].values.push_back(records_[i].values[c]);
  }
  return Cohort(std::move(feats), std::move(recs), outcomes_);
}

Cohort Cohort::with_records(std::vector<ResidentRecord> records) const {
  return Cohort(features_, std::move(records), outcomes_);
}

Cohort Cohort::with_feature(FeatureSpec spec, std::span<const std::optional<double>> values) const {
  if (values.size() != records_.size()) throw ValidationError("new feature column is not aligned with records");
  auto feats = features_;
  feats.push_back(std::move(spec));
  auto recs = records_;
  for (std::size_t i = 0; i < recs.size(); ++i) recs[i].values.push_back(values[i]);
  return Cohort(std::move(feats), std::move(recs), outcomes_);
}

ResidentRecord select_earliest_within_window(std::span<const TimedObservation> observations, int window_days) {
  if (window_days <= 0) throw ValidationError("window_days must be positive");
  const auto& schema = canonical_schema();
  struct Pick {
    int day;
    std::string answer;
  };
  std::map<std::size_t, Pick> picks;
  for (const auto& obs : observations) {
    auto j = find_feature(schema, obs.feature);
    if (!j) throw ValidationError("unknown feature '" + obs.feature + "'");
    if (obs.days_since_admission < 0) {
      throw ValidationError(obs.feature + ": negative days_since_admission " +
                            std::to_string(obs.days_since_admission));
    }
    if (obs.days_since_admission > window_days) continue;
    const std::string answer = trim(obs.answer);
    auto it = picks.find(*j);
    if (it == picks.end() || obs.days_since_admission < it->second.day ||
        (obs.days_since_admission == it->second.day && answer < it->second.answer)) {
      picks[*j] = Pick{obs.days_since_admission, answer};
    }
  }
  std::vector<FieldError> errors;
  ResidentRecord rec;
  rec.values.assign(schema.size(), std::nullopt);
  for (const auto& [j, pick] : picks) {
    try {
      rec.values[j] = schema[j].encode(pick.answer);
    } catch (const ValidationError& e) {
      errors.push_back({schema[j].name, e.what()});
    }
  }
  if (!errors.empty()) throw RecordError(std::move(errors));
  return rec;
}

ResidentRecord encode_record(const std::map<std::string, std::string>& raw_answers) {
  const auto& schema = canonical_schema();
  std::vector<FieldError> errors;
  ResidentRecord rec;
  rec.values.assign(schema.size(), std::nullopt);
  for (const auto& [name, text] : raw_answers) {
    auto j = find_feature(schema, name);
    if (!j) {
      errors.push_back({name, "unknown feature"});
      continue;
    }
    const std::string key = to_lower(trim(text));
    if (key.empty() || key == "missing") continue;
    try {
      rec.values[*j] = schema[*j].encode(text);
    } catch (const ValidationError& e) {
      errors.push_back({name, e.what()});
    }
  }
  if (!errors.empty()) throw RecordError(std::move(errors));
  return rec;
}

}  // namespace caresurv
