#include <doctest.h>

#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <thread>

#include "caresurv/serve.hpp"

#include <httplib.h>

using namespace caresurv;

namespace {

const SimulationResult& sim() {
  static const SimulationResult s = [] {
    SimConfig c;
    c.n = 3000;
    return simulate_cohort(c, 21);
  }();
  return s;
}

TrainOptions quick(const std::string& algorithm) {
  TrainOptions o;
  o.algorithm = algorithm;
  o.seed = 5;
  o.mice_cycles = 3;
  o.config_hash = "cfg-" + algorithm;
  o.params = nlohmann::json::object();
  if (algorithm == "xgb") o.params = {{"n_rounds", 300}, {"learning_rate", 0.05}};
  if (algorithm == "gb") o.params = {{"n_rounds", 30}};
  if (algorithm == "rf") o.params = {{"n_estimators", 6}};
  return o;
}

const ModelBundle& xgb_bundle() {
  static const ModelBundle b = train_bundle(sim().cohort, quick("xgb"));
  return b;
}

std::vector<std::vector<double>> random_records(const ModelBundle& b, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> r;
    for (const auto& f : b.features) {
      if (!f.allowed_codes.empty()) {
        std::uniform_int_distribution<std::size_t> pick(0, f.allowed_codes.size() - 1);
        r.push_back(f.allowed_codes[pick(rng)]);
      } else {
        std::uniform_int_distribution<int> code(f.min_code, f.max_code);
        r.push_back(code(rng));
      }
    }
    out.push_back(r);
  }
  return out;
}

nlohmann::json record_body(const ModelBundle& b, const std::vector<double>& x) {
  nlohmann::json r = nlohmann::json::object();
  for (std::size_t j = 0; j < x.size(); ++j) r[b.features[j].name] = x[j];
  return {{"record", r}};
}

std::vector<double> min_record(const ModelBundle& b) {
  std::vector<double> x;
  for (const auto& f : b.features) {
    x.push_back(f.allowed_codes.empty() ? f.min_code : *std::min_element(f.allowed_codes.begin(), f.allowed_codes.end()));
  }
  return x;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("caresurv_serve_" + name);
}

double prob_at(const nlohmann::json& response, int horizon) {
  for (const auto& h : response.at("horizons")) {
    if (h.at("horizon_days").get<int>() == horizon) return h.at("probability").get<double>();
  }
  FAIL("horizon missing");
  return 0;
}

}  // namespace

TEST_CASE("save and load reproduce predictions for every model family") {
  for (const std::string alg : {"xgb", "gb", "rf", "coxph", "lasso"}) {
    INFO(alg);
    const ModelBundle b = alg == "xgb" ? xgb_bundle() : train_bundle(sim().cohort, quick(alg));
    const auto path = temp_path(alg + ".bundle");
    save_bundle(b, path);
    const auto back = load_bundle(path);
    std::filesystem::remove(path);
    CHECK(model_kind(back.model) == model_kind(b.model));
    CHECK(bundle_id(back) == bundle_id(b));
    CHECK(back.provenance.config_hash == "cfg-" + alg);
    REQUIRE(back.scalers.size() == 4);
    const auto times = b.cohort_baseline.times;
    double worst = 0;
    for (const auto& x : random_records(b, 100, 8)) {
      worst = std::max(worst, std::abs(risk_score(b.model, x) - risk_score(back.model, x)));
      const auto c1 = predict_survival_any(b.model, x, times);
      const auto c2 = predict_survival_any(back.model, x, times);
      for (std::size_t k = 0; k < times.size(); ++k) worst = std::max(worst, std::abs(c1.survival[k] - c2.survival[k]));
      for (std::size_t s = 0; s < b.scalers.size(); ++s) {
        const int h = b.scalers[s].horizon_days;
        worst = std::max(worst, std::abs(calibrated_predict(b.model, b.scalers[s], x, h).probability -
                                         calibrated_predict(back.model, back.scalers[s], x, h).probability));
      }
      std::vector<std::optional<double>> partial(x.begin(), x.end());
      partial[0].reset();
      const auto i1 = b.imputation->apply(ResidentRecord{partial}, 3);
      const auto i2 = back.imputation->apply(ResidentRecord{partial}, 3);
      CHECK(i1.values == i2.values);
    }
    CHECK(worst <= 1e-12);
  }
}

TEST_CASE("bundle integrity checks") {
  const auto text = serialize_bundle(xgb_bundle());
  SUBCASE("truncation is rejected by checksum") {
    try {
      deserialize_bundle(text.substr(0, text.size() - 100));
      FAIL("expected rejection");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("checksum") != std::string::npos);
    }
    const auto path = temp_path("truncated.bundle");
    std::ofstream(path, std::ios::binary) << text.substr(0, text.size() / 2);
    CHECK_THROWS_AS(load_bundle(path), FormatError);
    std::filesystem::remove(path);
    CHECK_THROWS_AS(deserialize_bundle(text.substr(0, 20)), FormatError);
  }
  SUBCASE("a flipped payload byte is rejected") {
    auto bad = text;
    bad[bad.size() - 10] = bad[bad.size() - 10] == 'A' ? 'B' : 'A';
    CHECK_THROWS_WITH_AS(deserialize_bundle(bad), doctest::Contains("checksum"), FormatError);
  }
  SUBCASE("version mismatch names both versions") {
    auto bad = text;
    const auto pos = bad.find("\"schema_version\":1");
    REQUIRE(pos != std::string::npos);
    bad.replace(pos, 18, "\"schema_version\":9");
    try {
      deserialize_bundle(bad);
      FAIL("expected rejection");
    } catch (const FormatError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("9") != std::string::npos);
      CHECK(msg.find("version 1") != std::string::npos);
    }
  }
  SUBCASE("not a bundle") {
    CHECK_THROWS_AS(deserialize_bundle("{\"format\":\"other\"}\n{}"), FormatError);
    CHECK_THROWS_AS(deserialize_bundle("garbage\n"), FormatError);
    CHECK_THROWS_AS(load_bundle(temp_path("missing.bundle")), FormatError);
  }
  SUBCASE("invariants are enforced") {
    auto dup = xgb_bundle();
    dup.scalers.push_back(dup.scalers.front());
    CHECK_THROWS_AS(dup.validate(), ValidationError);
    CHECK_THROWS_AS(serialize_bundle(dup), ValidationError);
    auto renamed = xgb_bundle();
    renamed.features[0].name = "something_else";
    CHECK_THROWS_AS(renamed.validate(), ValidationError);
  }
}

TEST_CASE("empty model bundle round trips") {
  ModelBundle b;
  BoostedCoxModel m;
  m.feature_names = {"mobilisation"};
  m.baseline_hazard = StepFunction{{5, 50}, {0.1, 0.4}, 0.0};
  b.model = m;
  b.features = {canonical_feature(Feature::kMobilisation)};
  b.cohort_baseline = {{1, 30}, {1.0, 0.9}};
  const auto back = deserialize_bundle(serialize_bundle(b));
  CHECK(std::get<BoostedCoxModel>(back.model).trees.empty());
  CHECK(back.scalers.empty());
  CHECK_FALSE(back.imputation.has_value());
  CHECK(serialize_bundle(back) == serialize_bundle(b));
  const std::vector<double> x{2};
  CHECK(predict_survival_any(back.model, x, std::vector<double>{50}).survival[0] == doctest::Approx(std::exp(-0.4)));
}

TEST_CASE("service without a model") {
  PredictionService svc;
  const auto h = svc.health();
  CHECK(h.status == 200);
  CHECK(h.body["model_loaded"] == false);
  CHECK(svc.predict("{}").status == 503);
  CHECK(svc.explain("{}").status == 503);
  CHECK(svc.whatif("{}").status == 503);
  CHECK(svc.metadata().status == 503);
  CHECK(svc.cohort_baseline().status == 503);
  CHECK(svc.predict("{}").body.contains("fields"));
}

TEST_CASE("predict endpoint") {
  const auto& b = xgb_bundle();
  PredictionService svc(std::make_shared<const ModelBundle>(b));
  const auto x = random_records(b, 1, 4)[0];

  SUBCASE("response contract") {
    const auto r = svc.predict(record_body(b, x).dump());
    REQUIRE(r.status == 200);
    const auto& s = r.body["curve"]["survival"];
    for (std::size_t k = 1; k < s.size(); ++k) CHECK(s[k].get<double>() <= s[k - 1].get<double>());
    REQUIRE(r.body["horizons"].size() == 4);
    for (const auto& h : r.body["horizons"]) {
      const double p = h["probability"].get<double>();
      CHECK(p >= 0.0);
      CHECK(p <= 1.0);
      CHECK(std::abs(p * 1e4 - std::round(p * 1e4)) < 1e-6);
      const auto* sc = b.scaler_for(h["horizon_days"].get<int>());
      CHECK(p == round4(sc->predict(risk_score(b.model, x))));
    }
    CHECK(r.body["risk_margin"].get<double>() == risk_score(b.model, x));
    CHECK(r.body["imputed_fields"].empty());
    CHECK(r.body["cohort_baseline"]["times"].size() == b.cohort_baseline.times.size());
    CHECK(svc.predict(record_body(b, x).dump()).body == r.body);
  }
  SUBCASE("missing fields are imputed and flagged") {
    auto body = record_body(b, x);
    body["record"].erase(b.features[2].name);
    body["record"][b.features[3].name] = nullptr;
    const auto r = svc.predict(body.dump());
    REQUIRE(r.status == 200);
    CHECK(r.body["imputed_fields"] == nlohmann::json{b.features[2].name, b.features[3].name});
    const double v = r.body["record"][b.features[2].name].get<double>();
    CHECK(b.features[2].admits(v));
  }
  SUBCASE("answer text is encoded") {
    auto body = record_body(b, x);
    body["record"]["gender_male"] = "Male";
    const auto r = svc.predict(body.dump());
    REQUIRE(r.status == 200);
    CHECK(r.body["record"]["gender_male"] == 1.0);
  }
  SUBCASE("malformed body gives 400") {
    const auto r = svc.predict("{\"record\": ");
    CHECK(r.status == 400);
    CHECK(r.body["fields"] == nlohmann::json{"body"});
    CHECK(svc.predict("[1,2]").status == 400);
    CHECK(svc.predict("{\"rec\": {}}").body["fields"] == nlohmann::json{"record"});
  }
  SUBCASE("invalid values give 422 naming every field") {
    auto body = record_body(b, x);
    body["record"]["mobilisation"] = 9;
    body["record"]["gender_male"] = "Unknown answer";
    body["record"]["shoe_size"] = 3;
    body["record"]["age_value"] = 87.5;
    const auto r = svc.predict(body.dump());
    CHECK(r.status == 422);
    std::set<std::string> named;
    for (const auto& f : r.body["fields"]) named.insert(f["field"].get<std::string>());
    CHECK(named == std::set<std::string>{"mobilisation", "gender_male", "shoe_size", "age_value"});
  }
  SUBCASE("all-minimum ordinals sit on or above the cohort curve") {
    const auto r = svc.predict(record_body(b, min_record(b)).dump());
    REQUIRE(r.status == 200);
    const auto& s = r.body["curve"]["survival"];
    const auto& base = r.body["cohort_baseline"]["survival"];
    for (std::size_t k = 0; k < s.size(); ++k) CHECK(s[k].get<double>() >= base[k].get<double>());
  }
}

TEST_CASE("explain endpoint") {
  const auto& b = xgb_bundle();
  PredictionService svc(std::make_shared<const ModelBundle>(b));
  const auto x = random_records(b, 1, 5)[0];
  auto body = record_body(b, x);
  body["top_k"] = 3;
  const auto r = svc.explain(body.dump());
  REQUIRE(r.status == 200);
  double total = r.body["base_value"].get<double>();
  for (const auto& c : r.body["contributions"]) total += c["phi"].get<double>();
  CHECK(std::abs(total - r.body["margin"].get<double>()) < 1e-6);
  CHECK(r.body["margin"].get<double>() == doctest::Approx(risk_score(b.model, x)).epsilon(1e-12));
  CHECK(r.body["waterfall"]["entries"].size() == 4);
  CHECK(svc.explain(body.dump()).body == r.body);
  for (int k : {-1, 0}) {
    body["top_k"] = k;
    const auto bad = svc.explain(body.dump());
    CHECK(bad.status == 422);
    CHECK(bad.body["fields"][0]["field"] == "top_k");
  }

  for (const std::string alg : {"rf", "coxph"}) {
    INFO(alg);
    PredictionService other(std::make_shared<const ModelBundle>(train_bundle(sim().cohort, quick(alg))));
    const auto e = other.explain(record_body(b, x).dump());
    REQUIRE(e.status == 200);
    double sum = e.body["base_value"].get<double>();
    for (const auto& c : e.body["contributions"]) sum += c["phi"].get<double>();
    CHECK(std::abs(sum - e.body["margin"].get<double>()) < 1e-6);
  }
}

TEST_CASE("what-if endpoint") {
  const auto& b = xgb_bundle();
  PredictionService svc(std::make_shared<const ModelBundle>(b));
  auto x = random_records(b, 1, 6)[0];
  const auto mob = *find_feature(b.features, "mobilisation");
  x[mob] = 0;
  auto body = record_body(b, x);

  SUBCASE("empty edit list returns the base only") {
    body["edits"] = nlohmann::json::array();
    const auto r = svc.whatif(body.dump());
    REQUIRE(r.status == 200);
    CHECK(r.body["responses"].size() == 1);
    CHECK(r.body["responses"][0]["edit"].is_null());
  }
  SUBCASE("an unchanged edit gives an identical prediction") {
    body["edits"] = {{{"field", "mobilisation"}, {"value", 0}}};
    const auto r = svc.whatif(body.dump());
    REQUIRE(r.status == 200);
    auto a = r.body["responses"][0];
    auto c = r.body["responses"][1];
    a.erase("edit");
    c.erase("edit");
    CHECK(a == c);
  }
  SUBCASE("worsening mobilisation lowers six-month survival") {
    body["edits"] = {{{"field", "mobilisation"}, {"value", 4}}, {{"field", "weight_loss"}, {"value", 1}}};
    const auto r = svc.whatif(body.dump());
    REQUIRE(r.status == 200);
    REQUIRE(r.body["responses"].size() == 3);
    CHECK(prob_at(r.body["responses"][1], 182) < prob_at(r.body["responses"][0], 182));
    CHECK(r.body["responses"][1]["edit"]["field"] == "mobilisation");
    CHECK(r.body["responses"][2]["edit"]["index"] == 1);
    CHECK(r.body["responses"][2]["record"]["mobilisation"] == 0.0);
  }
  SUBCASE("invalid edits are listed by index") {
    body["edits"] = {{{"field", "mobilisation"}, {"value", 2}},
                     {{"field", "mobilisation"}, {"value", 7}},
                     {{"field", "nope"}, {"value", 1}},
                     {{"value", 1}}};
    const auto r = svc.whatif(body.dump());
    CHECK(r.status == 422);
    REQUIRE(r.body["fields"].size() == 3);
    CHECK(r.body["fields"][0]["index"] == 1);
    CHECK(r.body["fields"][1]["index"] == 2);
    CHECK(r.body["fields"][2]["index"] == 3);
  }
}

TEST_CASE("metadata and baseline endpoints") {
  const auto& b = xgb_bundle();
  PredictionService svc(std::make_shared<const ModelBundle>(b));
  const auto m = svc.metadata();
  REQUIRE(m.status == 200);
  CHECK(svc.metadata().body == m.body);
  CHECK(m.body["provenance"]["config_hash"] == "cfg-xgb");
  CHECK(m.body["horizons"] == nlohmann::json{30, 91, 182, 365});
  CHECK(m.body["features"].size() == b.features.size());
  for (const auto& f : m.body["features"]) {
    const auto j = find_feature(canonical_schema(), f["name"].get<std::string>());
    REQUIRE(j.has_value());
    CHECK(f["min_code"] == canonical_schema()[*j].min_code);
    CHECK(f["max_code"] == canonical_schema()[*j].max_code);
  }
  const auto base = svc.cohort_baseline();
  REQUIRE(base.status == 200);
  CHECK(base.body["times"].size() == base.body["survival"].size());
  CHECK(svc.handle("GET", "/nowhere", "").status == 404);
  CHECK(svc.handle("GET", "/predict", "").status == 405);
  CHECK(svc.handle("GET", "/health", "").status == 200);
}

TEST_CASE("hot swap never exposes a torn bundle") {
  auto first = std::make_shared<const ModelBundle>(xgb_bundle());
  auto second = std::make_shared<const ModelBundle>(train_bundle(sim().cohort, quick("coxph")));
  PredictionService svc(first);
  const auto body = record_body(*first, random_records(*first, 1, 7)[0]).dump();
  const auto expect_first = svc.predict(body).body;
  svc.set_bundle(second);
  const auto expect_second = svc.predict(body).body;
  REQUIRE(expect_first["model_version"] != expect_second["model_version"]);

  std::atomic<bool> done{false};
  std::atomic<int> mismatches{0};
  std::atomic<int> calls{0};
  std::vector<std::thread> readers;
  for (int t = 0; t < 3; ++t) {
    readers.emplace_back([&] {
      while (!done) {
        const auto r = svc.predict(body).body;
        ++calls;
        if (r != expect_first && r != expect_second) ++mismatches;
      }
    });
  }
  for (int k = 0; k < 40; ++k) svc.set_bundle(k % 2 ? second : first);
  while (calls < 50) std::this_thread::yield();
  done = true;
  for (auto& t : readers) t.join();
  CHECK(mismatches == 0);
}

TEST_CASE("http server round trip") {
  PredictionService svc(std::make_shared<const ModelBundle>(xgb_bundle()));
  HttpServer server(svc);
  const int port = server.bind("127.0.0.1", 0);
  std::thread th([&] { server.listen(); });
  httplib::Client cli("127.0.0.1", port);
  for (int i = 0; i < 100; ++i) {
    if (auto h = cli.Get("/health")) break;
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
  auto h = cli.Get("/health");
  REQUIRE(h);
  CHECK(h->status == 200);
  CHECK(nlohmann::json::parse(h->body)["model_loaded"] == true);
  const auto body = record_body(xgb_bundle(), random_records(xgb_bundle(), 1, 9)[0]).dump();
  auto p = cli.Post("/predict", body, "application/json");
  REQUIRE(p);
  CHECK(p->status == 200);
  CHECK(nlohmann::json::parse(p->body) == svc.predict(body).body);
  auto bad = cli.Post("/predict", "{oops", "application/json");
  REQUIRE(bad);
  CHECK(bad->status == 400);
  auto missing = cli.Get("/unknown");
  REQUIRE(missing);
  CHECK(missing->status == 404);
  CHECK(nlohmann::json::parse(missing->body).contains("fields"));
  server.stop();
  th.join();
}
