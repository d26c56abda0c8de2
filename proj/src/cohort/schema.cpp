#include <algorithm>
#include <charconv>
#include <set>
#include <sstream>

#include "caresurv/cohort.hpp"
#include "caresurv/util.hpp"

namespace caresurv {

std::string_view to_string(CensorReason reason) {
  switch (reason) {
    case CensorReason::kNone: return "none";
    case CensorReason::kCurrentResident: return "current_resident";
    case CensorReason::kTransferFacility: return "transfer_facility";
    case CensorReason::kDischargedHome: return "discharged_home";
    case CensorReason::kTransferHospital: return "transfer_hospital";
  }
  return "none";
}

CensorReason censor_reason_from_string(std::string_view text) {
  const std::string key = to_lower(trim(text));
  for (auto r : {CensorReason::kNone, CensorReason::kCurrentResident, CensorReason::kTransferFacility,
                 CensorReason::kDischargedHome, CensorReason::kTransferHospital}) {
    if (key == to_string(r)) return r;
  }
  throw ValidationError("unknown censor reason '" + std::string(text) + "'");
}

void validate(const SurvivalOutcome& outcome) {
  if (outcome.time_days < 1) {
    throw ValidationError("time_days must be >= 1, got " + std::to_string(outcome.time_days));
  }
  if (outcome.event && outcome.reason != CensorReason::kNone) {
    throw ValidationError("an event row cannot carry censor reason " + std::string(to_string(outcome.reason)));
  }
}

namespace {

FeatureSpec ordinal(std::string name, std::string question, std::vector<AnswerCode> answers) {
  FeatureSpec spec;
  spec.name = std::move(name);
  spec.question = std::move(question);
  spec.answers = std::move(answers);
  int lo = spec.answers.front().code;
  int hi = lo;
  for (const auto& a : spec.answers) {
    lo = std::min(lo, a.code);
    hi = std::max(hi, a.code);
  }
  spec.min_code = lo;
  spec.max_code = hi;
  return spec;
}

FeatureSpec yes_no(std::string name, std::string question) {
  return ordinal(std::move(name), std::move(question), {{"No", 0}, {"Yes", 1}});
}

std::vector<FeatureSpec> build_schema() {
  std::vector<FeatureSpec> s;
  {
    auto age = ordinal("age_value", "Age category (years)",
                       {{"65-69", 67}, {"70-74", 72}, {"75-79", 77}, {"80-84", 82},
                        {"85-89", 87}, {"90-94", 92}, {"95-99", 97}, {"100+", 100}});
    age.allowed_codes = {67, 72, 77, 82, 87, 92, 97, 100};
    s.push_back(std::move(age));
  }
  s.push_back(ordinal("gender_male", "Gender",
                      {{"Female", 0}, {"Male", 1}, {"Other/Gender Diverse", 0}, {"Other", 0}, {"Unknown", 0}}));
  s.push_back(ordinal("falls_history", "History of falls",
                      {{"No history of falls", 0},
                       {"No history", 0},
                       {"4 or less in last 6 months", 1},
                       {"5 or more in last 6 months", 2},
                       {"3 or more falls in one month period", 3}}));
  s.push_back(ordinal("chess_scale_score", "What was the CHESS scale score?",
                      {{"No symptoms", 0},
                       {"Minimal health instability", 1},
                       {"Low health instability", 2},
                       {"Moderate health instability", 3},
                       {"High health instability", 4},
                       {"Highest level of instability", 5}}));
  {
    FeatureSpec rx;
    rx.name = "rx_risk_score";
    rx.question = "What was the weighted Rx-Risk scale score?";
    rx.min_code = -3;
    rx.max_code = 23;
    s.push_back(std::move(rx));
  }
  {
    FeatureSpec shc;
    shc.name = "specific_health_conditions";
    shc.question = "Was this diagnosis present? (count of diagnosis groups)";
    shc.min_code = 0;
    shc.max_code = 5;
    shc.counted_items = {"Dementia", "Heart disease", "Cancer", "Diabetes", "Lung disease"};
    s.push_back(std::move(shc));
  }
  s.push_back(ordinal("cognitive_performance_scale_score", "What was the cognitive performance scale score?",
                      {{"Intact", 0},
                       {"Borderline intact", 1},
                       {"Mild impairment", 2},
                       {"Moderate impairment", 3},
                       {"Moderate/Severe impairment", 4},
                       {"Severe impairment", 5},
                       {"Very severe impairment", 6}}));
  s.push_back(ordinal("depression_rating_scale_score", "What was the depression rating scale score?",
                      {{"None (0)", 0},
                       {"None", 0},
                       {"Mild (1-2)", 1},
                       {"Mild", 1},
                       {"Moderate (3-5)", 2},
                       {"Moderate", 2},
                       {"Severe (6-14)", 3},
                       {"Severe", 3}}));
  s.push_back(ordinal("weight_loss", "Has the resident lost weight recently?",
                      {{"No", 0}, {"Unsure", 0}, {"Yes", 1}}));
  s.push_back(yes_no("poor_eating_or_lack_of_appetite", "Is the resident eating poorly or has a lack of appetite?"));
  s.push_back(ordinal("mobilisation", "How does your resident mobilise?",
                      {{"Independent", 0},
                       {"Supervision or prompting", 1},
                       {"1 person assistance", 2},
                       {"2 person assistance", 3},
                       {"Does not mobilise (bed or chair bound)", 4}}));
  s.push_back(ordinal("mobility_equipment", "What equipment does your resident use to mobilise safely?",
                      {{"None", 0},
                       {"Walking stick", 1},
                       {"Walking frame", 2},
                       {"Transfer belt or other", 3},
                       {"Gutter frame", 4},
                       {"Wheelchair, fallout chair or lazyboy", 5}}));
  s.push_back(yes_no("smoking", "Has your resident smoked in the past?"));
  s.push_back(yes_no("sleep_assist", "Does your resident require assistance to settle to bed at night?"));
  s.push_back(ordinal("skin_integrity_score", "Has your resident's skin integrity changed since last assessment?",
                      {{"Improved", 0}, {"No Change", 0}, {"Fluctuated", 1}, {"Declined", 2}}));
  s.push_back(ordinal("pressure_ulcer_risk_score", "What was the Pressure Ulcer Risk scale?",
                      {{"Very low risk", 0},
                       {"Low risk", 1},
                       {"Moderate risk", 2},
                       {"High risk", 3},
                       {"Very high risk", 4}}));
  s.push_back(yes_no("faecal_incontinence", "Is the resident incontinent of faeces?"));
  s.push_back(yes_no("urinary_incontinence", "Is the resident incontinent of urine?"));
  return s;
}

std::optional<int> parse_int(std::string_view text) {
  int value = 0;
  const char* first = text.data();
  const char* last = text.data() + text.size();
  if (!text.empty() && text.front() == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last || first == last) return std::nullopt;
  return value;
}

}  // namespace

const std::vector<FeatureSpec>& canonical_schema() {
  static const std::vector<FeatureSpec> schema = build_schema();
  return schema;
}

const FeatureSpec& canonical_feature(Feature f) { return canonical_schema().at(static_cast<std::size_t>(f)); }

std::optional<std::size_t> find_feature(std::span<const FeatureSpec> schema, std::string_view name) {
  for (std::size_t j = 0; j < schema.size(); ++j) {
    if (schema[j].name == name) return j;
  }
  return std::nullopt;
}

bool FeatureSpec::admits(double value) const {
  if (!(value >= min_code && value <= max_code)) return false;
  if (value != static_cast<double>(static_cast<long long>(value))) return false;
  if (allowed_codes.empty()) return true;
  return std::find(allowed_codes.begin(), allowed_codes.end(), static_cast<int>(value)) != allowed_codes.end();
}

int FeatureSpec::encode(std::string_view text) const {
  const std::string cleaned = trim(text);
  const std::string key = to_lower(cleaned);
  for (const auto& a : answers) {
    if (to_lower(a.answer) == key) return a.code;
  }
  if (!counted_items.empty() && !cleaned.empty() && !parse_int(cleaned)) {
    if (key == "none") return 0;
    std::set<std::string> named;
    std::stringstream ss(cleaned);
    std::string item;
    while (std::getline(ss, item, ';')) {
      const std::string k = to_lower(trim(item));
      if (k.empty()) continue;
      auto it = std::find_if(counted_items.begin(), counted_items.end(),
                             [&](const std::string& c) { return to_lower(c) == k; });
      if (it == counted_items.end()) {
        throw ValidationError(name + ": unknown item '" + trim(item) + "'");
      }
      named.insert(k);
    }
    return static_cast<int>(named.size());
  }
  if (auto v = parse_int(cleaned)) {
    if (admits(*v)) return *v;
    throw ValidationError(name + ": value " + cleaned + " outside admissible codes [" + std::to_string(min_code) +
                          ", " + std::to_string(max_code) + "]");
  }
  throw ValidationError(name + ": unknown category '" + cleaned + "'");
}

std::vector<std::pair<int, std::string>> FeatureSpec::code_labels() const {
  std::vector<std::pair<int, std::string>> out;
  for (const auto& a : answers) {
    if (std::none_of(out.begin(), out.end(), [&](const auto& p) { return p.first == a.code; })) {
      out.emplace_back(a.code, a.answer);
    }
  }
  return out;
}

namespace {

std::string join_errors(const std::vector<FieldError>& errors) {
  std::string msg = "invalid record:";
  for (const auto& e : errors) msg += " [" + e.field + ": " + e.message + "]";
  return msg;
}

}  // namespace

RecordError::RecordError(std::vector<FieldError> errors)
    : ValidationError(join_errors(errors)), errors_(std::move(errors)) {}

}  // namespace caresurv
