#include <cmath>

#include "caresurv/serve.hpp"
#include "caresurv/util.hpp"

namespace caresurv {

namespace {

HttpResult error_result(int status, const std::string& message, nlohmann::json fields = nlohmann::json::array()) {
  return {status, {{"error", message}, {"fields", std::move(fields)}}};
}

HttpResult no_model() { return error_result(503, "no model loaded"); }

struct BadRequest {
  HttpResult result;
};

nlohmann::json parse_body(const std::string& body) {
  try {
    auto j = nlohmann::json::parse(body);
    if (!j.is_object()) throw BadRequest{error_result(400, "request body must be a JSON object", {"body"})};
    return j;
  } catch (const nlohmann::json::parse_error& e) {
    throw BadRequest{error_result(400, std::string("malformed JSON: ") + e.what(), {"body"})};
  }
}

std::vector<double> rounded(const std::vector<double>& v) {
  std::vector<double> out;
  out.reserve(v.size());
  for (double x : v) out.push_back(round4(x));
  return out;
}

nlohmann::json field_error(const std::string& field, const std::string& message) {
  return {{"field", field}, {"message", message}};
}

// Code for one field value: integers must be admissible codes, strings are answer text.
std::optional<double> code_of(const FeatureSpec& spec, const nlohmann::json& v, std::string& error) {
  if (v.is_null()) return std::nullopt;
  if (v.is_number()) {
    const double x = v.get<double>();
    if (!std::isfinite(x) || x != std::floor(x) || !spec.admits(x)) {
      std::string codes;
      if (spec.allowed_codes.empty()) {
        codes = std::to_string(spec.min_code) + ".." + std::to_string(spec.max_code);
      } else {
        for (int c : spec.allowed_codes) codes += (codes.empty() ? "" : ", ") + std::to_string(c);
      }
      error = "value " + v.dump() + " is not an admissible code (" + codes + ")";
      return std::nullopt;
    }
    return x;
  }
  if (v.is_string()) {
    try {
      return spec.encode(v.get<std::string>());
    } catch (const ValidationError& e) {
      error = e.what();
      return std::nullopt;
    }
  }
  error = "value must be an integer code, answer text or null";
  return std::nullopt;
}

struct ParsedRecord {
  ResidentRecord record;
  std::vector<std::string> ignored;
};

ParsedRecord parse_record(const ModelBundle& b, const nlohmann::json& body) {
  if (!body.contains("record") || !body.at("record").is_object()) {
    throw BadRequest{error_result(400, "body must contain a 'record' object", {"record"})};
  }
  ParsedRecord p;
  p.record.values.assign(b.features.size(), std::nullopt);
  nlohmann::json errors = nlohmann::json::array();
  for (const auto& [name, value] : body.at("record").items()) {
    const auto j = find_feature(b.features, name);
    if (!j) {
      if (find_feature(canonical_schema(), name)) {
        p.ignored.push_back(name);
      } else {
        errors.push_back(field_error(name, "unknown field"));
      }
      continue;
    }
    std::string err;
    p.record.values[*j] = code_of(b.features[*j], value, err);
    if (!err.empty()) errors.push_back(field_error(name, err));
  }
  if (!errors.empty()) throw BadRequest{{422, {{"error", "invalid record"}, {"fields", errors}}}};
  return p;
}

struct Completed {
  std::vector<double> x;
  std::vector<std::string> imputed;
};

Completed complete(const ModelBundle& b, const ResidentRecord& record) {
  Completed c;
  for (std::size_t j = 0; j < record.values.size(); ++j) {
    if (!record.values[j]) c.imputed.push_back(b.features[j].name);
  }
  ResidentRecord full = record;
  if (!c.imputed.empty()) {
    if (!b.imputation) {
      nlohmann::json errors = nlohmann::json::array();
      for (const auto& f : c.imputed) errors.push_back(field_error(f, "required: the bundle has no imputation models"));
      throw BadRequest{{422, {{"error", "invalid record"}, {"fields", errors}}}};
    }
    full = b.imputation->apply(record, b.imputation->seed);
  }
  for (const auto& v : full.values) c.x.push_back(*v);
  return c;
}

std::string response_id(const std::string& model_id, const std::string& endpoint, const nlohmann::json& input) {
  return sha256_hex(model_id + "|" + endpoint + "|" + input.dump()).substr(0, 16);
}

nlohmann::json record_json(const ModelBundle& b, std::span<const double> x) {
  nlohmann::json r = nlohmann::json::object();
  for (std::size_t j = 0; j < x.size(); ++j) r[b.features[j].name] = x[j];
  return r;
}

nlohmann::json prediction(const ModelBundle& b, const std::string& id, const Completed& c,
                          const std::vector<std::string>& ignored) {
  nlohmann::json j;
  const double margin = risk_score(b.model, c.x);
  const auto curve = predict_survival_any(b.model, c.x, b.cohort_baseline.times);
  j["model_version"] = id.substr(0, 16);
  j["risk_margin"] = margin;
  j["curve"] = {{"times", curve.times}, {"survival", rounded(curve.survival)}};
  auto& hs = j["horizons"] = nlohmann::json::array();
  for (const auto& s : b.scalers) {
    const auto p = calibrated_predict(b.model, s, c.x, s.horizon_days);
    hs.push_back({{"horizon_days", s.horizon_days},
                  {"probability", round4(p.probability)},
                  {"uncalibrated_survival", round4(p.uncalibrated_survival)},
                  {"scaler", {{"a", s.a}, {"b", s.b}, {"horizon_days", s.horizon_days}, {"n_train", s.n_train}}}});
  }
  j["cohort_baseline"] = {{"times", b.cohort_baseline.times}, {"survival", rounded(b.cohort_baseline.survival)}};
  j["record"] = record_json(b, c.x);
  j["imputed_fields"] = c.imputed;
  j["ignored_fields"] = ignored;
  j["response_id"] = response_id(id, "predict", j["record"]);
  return j;
}

template <typename F>
HttpResult guarded(F&& f) {
  try {
    return f();
  } catch (const BadRequest& e) {
    return e.result;
  } catch (const RecordError& e) {
    nlohmann::json fields = nlohmann::json::array();
    for (const auto& fe : e.errors()) fields.push_back(field_error(fe.field, fe.message));
    return {422, {{"error", "invalid record"}, {"fields", fields}}};
  } catch (const std::exception& e) {
    return error_result(500, std::string("internal error: ") + e.what());
  }
}

}  // namespace

double round4(double p) { return std::round(p * 1e4) / 1e4; }

PredictionService::PredictionService(std::shared_ptr<const ModelBundle> bundle) { set_bundle(std::move(bundle)); }

void PredictionService::set_bundle(std::shared_ptr<const ModelBundle> bundle) {
  std::shared_ptr<const Loaded> next;
  if (bundle) {
    bundle->validate();
    auto l = std::make_shared<Loaded>();
    l->id = bundle_id(*bundle);
    l->bundle = std::move(bundle);
    next = std::move(l);
  }
  std::lock_guard<std::mutex> lock(mutex_);
  loaded_ = std::move(next);
}

std::shared_ptr<const ModelBundle> PredictionService::bundle() const {
  auto s = snapshot();
  return s ? s->bundle : nullptr;
}

std::shared_ptr<const PredictionService::Loaded> PredictionService::snapshot() const {
  std::lock_guard<std::mutex> lock(mutex_);
  return loaded_;
}

HttpResult PredictionService::health() const {
  auto s = snapshot();
  nlohmann::json j{{"status", "ok"}, {"model_loaded", s != nullptr}};
  j["model_version"] = s ? nlohmann::json(s->id.substr(0, 16)) : nlohmann::json(nullptr);
  return {200, j};
}

HttpResult PredictionService::metadata() const {
  auto s = snapshot();
  if (!s) return no_model();
  const auto& b = *s->bundle;
  nlohmann::json feats = nlohmann::json::array();
  for (const auto& f : b.features) {
    nlohmann::json labels = nlohmann::json::array();
    for (const auto& [code, label] : f.code_labels()) labels.push_back({{"code", code}, {"label", label}});
    feats.push_back({{"name", f.name},
                     {"question", f.question},
                     {"min_code", f.min_code},
                     {"max_code", f.max_code},
                     {"allowed_codes", f.allowed_codes},
                     {"labels", labels},
                     {"counted_items", f.counted_items}});
  }
  nlohmann::json horizons = nlohmann::json::array();
  for (const auto& sc : b.scalers) horizons.push_back(sc.horizon_days);
  return {200,
          {{"schema_version", b.schema_version},
           {"model_version", s->id.substr(0, 16)},
           {"model_id", s->id},
           {"model_kind", model_kind(b.model)},
           {"features", feats},
           {"horizons", horizons},
           {"curve_times", b.cohort_baseline.times},
           {"metrics", b.provenance.metrics},
           {"provenance",
            {{"config_hash", b.provenance.config_hash},
             {"data_hash", b.provenance.data_hash},
             {"seed", b.provenance.seed},
             {"algorithm", b.provenance.algorithm}}},
           {"imputation_available", b.imputation.has_value()}}};
}

HttpResult PredictionService::cohort_baseline() const {
  auto s = snapshot();
  if (!s) return no_model();
  const auto& c = s->bundle->cohort_baseline;
  return {200, {{"model_version", s->id.substr(0, 16)}, {"times", c.times}, {"survival", rounded(c.survival)}}};
}

HttpResult PredictionService::predict(const std::string& body) const {
  auto s = snapshot();
  if (!s) return no_model();
  return guarded([&]() -> HttpResult {
    const auto req = parse_body(body);
    const auto parsed = parse_record(*s->bundle, req);
    return {200, prediction(*s->bundle, s->id, complete(*s->bundle, parsed.record), parsed.ignored)};
  });
}

HttpResult PredictionService::explain(const std::string& body) const {
  auto s = snapshot();
  if (!s) return no_model();
  return guarded([&]() -> HttpResult {
    const auto& b = *s->bundle;
    const auto req = parse_body(body);
    std::size_t top_k = 10;
    if (req.contains("top_k")) {
      const auto& t = req.at("top_k");
      if (!t.is_number_integer() || t.get<long long>() < 1) {
        return {422, {{"error", "invalid request"}, {"fields", {field_error("top_k", "must be a positive integer")}}}};
      }
      top_k = t.get<std::size_t>();
    }
    const auto parsed = parse_record(b, req);
    const auto c = complete(b, parsed.record);
    const auto e = explain_any(b.model, c.x);
    nlohmann::json contributions = nlohmann::json::array();
    for (std::size_t j = 0; j < e.contributions.size(); ++j) {
      contributions.push_back({{"feature", e.feature_names[j]}, {"value", e.feature_values[j]}, {"phi", e.contributions[j]}});
    }
    nlohmann::json j{{"model_version", s->id.substr(0, 16)},
                     {"base_value", e.base_value},
                     {"margin", e.margin},
                     {"contributions", contributions},
                     {"waterfall", waterfall_data(e, top_k).to_json()},
                     {"top_k", top_k},
                     {"record", record_json(b, c.x)},
                     {"imputed_fields", c.imputed},
                     {"ignored_fields", parsed.ignored}};
    j["response_id"] = response_id(s->id, "explain:" + std::to_string(top_k), j["record"]);
    return {200, j};
  });
}

HttpResult PredictionService::whatif(const std::string& body) const {
  auto s = snapshot();
  if (!s) return no_model();
  return guarded([&]() -> HttpResult {
    const auto& b = *s->bundle;
    const auto req = parse_body(body);
    const auto parsed = parse_record(b, req);
    nlohmann::json edits = req.value("edits", nlohmann::json::array());
    if (!edits.is_array()) return error_result(400, "'edits' must be an array", {"edits"});

    nlohmann::json errors = nlohmann::json::array();
    std::vector<std::pair<std::size_t, double>> applied;
    for (std::size_t i = 0; i < edits.size(); ++i) {
      const auto& e = edits[i];
      const std::string name = e.is_object() && e.contains("field") && e.at("field").is_string() ? e.at("field").get<std::string>() : "";
      auto bad = [&](const std::string& msg) {
        errors.push_back({{"index", i}, {"field", name}, {"message", msg}});
      };
      if (name.empty()) {
        bad("edit must be an object with a 'field' name and a 'value'");
        continue;
      }
      const auto j = find_feature(b.features, name);
      if (!j) {
        bad("unknown field");
        continue;
      }
      if (!e.contains("value") || e.at("value").is_null()) {
        bad("value is required");
        continue;
      }
      std::string err;
      const auto v = code_of(b.features[*j], e.at("value"), err);
      if (!err.empty()) {
        bad(err);
        continue;
      }
      applied.emplace_back(*j, *v);
    }
    if (!errors.empty()) return {422, {{"error", "invalid edits"}, {"fields", errors}}};

    nlohmann::json responses = nlohmann::json::array();
    auto base = prediction(b, s->id, complete(b, parsed.record), parsed.ignored);
    base["edit"] = nullptr;
    responses.push_back(std::move(base));
    for (std::size_t i = 0; i < applied.size(); ++i) {
      ResidentRecord variant = parsed.record;
      variant.values[applied[i].first] = applied[i].second;
      auto p = prediction(b, s->id, complete(b, variant), parsed.ignored);
      p["edit"] = {{"index", i}, {"field", b.features[applied[i].first].name}, {"value", applied[i].second}};
      responses.push_back(std::move(p));
    }
    return {200, {{"model_version", s->id.substr(0, 16)}, {"responses", responses}}};
  });
}

HttpResult PredictionService::handle(const std::string& method, const std::string& path, const std::string& body) const {
  if (path == "/health") return method == "GET" ? health() : error_result(405, "use GET for " + path);
  if (path == "/model/metadata") return method == "GET" ? metadata() : error_result(405, "use GET for " + path);
  if (path == "/cohort/baseline") return method == "GET" ? cohort_baseline() : error_result(405, "use GET for " + path);
  if (path == "/predict") return method == "POST" ? predict(body) : error_result(405, "use POST for " + path);
  if (path == "/explain") return method == "POST" ? explain(body) : error_result(405, "use POST for " + path);
  if (path == "/whatif") return method == "POST" ? whatif(body) : error_result(405, "use POST for " + path);
  return error_result(404, "no route for " + method + " " + path);
}

}  // namespace caresurv
