#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "caresurv/cohort.hpp"
#include "caresurv/survcore.hpp"

using namespace caresurv;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("caresurv_test_" + name);
}

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

std::string header() {
  std::string h;
  for (const auto& f : canonical_schema()) h += f.name + ",";
  return h + "time_days,event";
}

std::string row(int time, int event) {
  std::string r;
  for (const auto& f : canonical_schema()) r += std::to_string(f.min_code) + ",";
  return r + std::to_string(time) + "," + std::to_string(event);
}

std::size_t index_of(const std::string& name) { return *find_feature(canonical_schema(), name); }

}  // namespace

TEST_CASE("encode_record maps answer text to codes") {
  const auto rec = encode_record({{"age_value", "85-89"},
                                  {"mobility_equipment", " walking FRAME "},
                                  {"gender_male", "Other/Gender Diverse"},
                                  {"mobilisation", "Does not mobilise (bed or chair bound)"}});
  CHECK(rec.values[index_of("age_value")] == 87);
  CHECK(rec.values[index_of("mobility_equipment")] == 2);
  CHECK(rec.values[index_of("gender_male")] == 0);
  CHECK(rec.values[index_of("mobilisation")] == 4);
  CHECK_FALSE(rec.values[index_of("smoking")].has_value());
  CHECK(rec.missing_count() == kNumCanonicalFeatures - 4);
}

TEST_CASE("encode_record rejects unknown text naming the feature") {
  try {
    encode_record({{"falls_history", "sometimes"}, {"smoking", "Yes"}});
    FAIL("expected rejection");
  } catch (const RecordError& e) {
    REQUIRE(e.errors().size() == 1);
    CHECK(e.errors()[0].field == "falls_history");
    CHECK(std::string(e.what()).find("sometimes") != std::string::npos);
  }
}

TEST_CASE("every listed answer maps to exactly one admissible code") {
  for (const auto& f : canonical_schema()) {
    for (const auto& a : f.answers) {
      CHECK(f.encode(a.answer) == a.code);
      CHECK(f.admits(a.code));
    }
  }
}

TEST_CASE("earliest observation within the window") {
  SUBCASE("earliest wins") {
    std::vector<TimedObservation> obs{{"falls_history", "No history", 2}, {"falls_history", "4 or less in last 6 months", 5}};
    CHECK(select_earliest_within_window(obs).values[index_of("falls_history")] == 0);
  }
  SUBCASE("late observation is missing") {
    std::vector<TimedObservation> obs{{"chess_scale_score", "Low health instability", 40}};
    CHECK_FALSE(select_earliest_within_window(obs).values[index_of("chess_scale_score")].has_value());
  }
  SUBCASE("negative day names the feature") {
    std::vector<TimedObservation> obs{{"smoking", "Yes", -1}};
    CHECK_THROWS_WITH_AS(select_earliest_within_window(obs), doctest::Contains("smoking"), ValidationError);
  }
  SUBCASE("brute-force scan oracle, order independence and idempotence") {
    std::mt19937_64 rng(41);
    const auto& schema = canonical_schema();
    std::uniform_int_distribution<std::size_t> feat(0, schema.size() - 1);
    std::uniform_int_distribution<int> day(0, 60);
    std::vector<TimedObservation> obs;
    for (int i = 0; i < 1000; ++i) {
      const auto& f = schema[feat(rng)];
      std::string answer;
      if (f.answers.empty()) {
        std::uniform_int_distribution<int> c(f.min_code, f.max_code);
        answer = std::to_string(c(rng));
      } else {
        std::uniform_int_distribution<std::size_t> a(0, f.answers.size() - 1);
        answer = f.answers[a(rng)].answer;
      }
      obs.push_back({f.name, answer, day(rng)});
    }
    const auto got = select_earliest_within_window(obs);
    for (std::size_t j = 0; j < schema.size(); ++j) {
      int best_day = 1000;
      std::optional<double> best;
      std::string best_answer;
      for (const auto& o : obs) {
        if (o.feature != schema[j].name || o.days_since_admission > 31) continue;
        if (o.days_since_admission < best_day || (o.days_since_admission == best_day && o.answer < best_answer)) {
          best_day = o.days_since_admission;
          best_answer = o.answer;
          best = schema[j].encode(o.answer);
        }
      }
      CHECK(got.values[j] == best);
    }
    auto shuffled = obs;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    CHECK(select_earliest_within_window(shuffled).values == got.values);
    CHECK(select_earliest_within_window(obs).values == got.values);
  }
}

TEST_CASE("csv ingestion") {
  SUBCASE("header only") {
    const auto p = temp_file("empty.csv");
    write_text(p, header() + "\n");
    CHECK(ingest_csv(p).cohort.size() == 0);
  }
  SUBCASE("three rows") {
    const auto p = temp_file("three.csv");
    write_text(p, header() + "\n" + row(10, 1) + "\n" + row(20, 0) + "\n" + row(30, 1) + "\n");
    const auto r = ingest_csv(p);
    REQUIRE(r.cohort.size() == 3);
    CHECK(r.cohort.outcomes()[1].time_days == 20);
    CHECK_FALSE(r.cohort.outcomes()[1].event);
    CHECK(r.cohort.records()[2].values[index_of("age_value")] == 67);
  }
  SUBCASE("negative time is rejected and counted") {
    const auto p = temp_file("negative.csv");
    std::string text = header() + "\n";
    for (int i = 0; i < 9; ++i) text += row(10 + i, 1) + "\n";
    text += row(-3, 0) + "\n";
    write_text(p, text);
    const auto r = ingest_csv(p);
    CHECK(r.cohort.size() == 9);
    CHECK(r.rejected_nonpositive_time == 1);
    CHECK(r.errors.empty());
  }
  SUBCASE("malformed rows are collected up to the limit") {
    const auto p = temp_file("malformed.csv");
    std::string text = header() + "\n";
    for (int i = 0; i < 19; ++i) text += row(10 + i, 1) + "\n";
    text += "1,2,3\n";
    write_text(p, text);
    const auto r = ingest_csv(p);
    CHECK(r.cohort.size() == 19);
    REQUIRE(r.errors.size() == 1);
    CHECK(r.errors[0].line == 21);
  }
  SUBCASE("more than a tenth malformed fails") {
    const auto p = temp_file("toomany.csv");
    std::string text = header() + "\n";
    for (int i = 0; i < 8; ++i) text += row(10 + i, 1) + "\n";
    text += "1,2,3\n" + row(5, 7) + "\n";
    write_text(p, text);
    CHECK_THROWS_AS(ingest_csv(p), ValidationError);
  }
  SUBCASE("write then ingest round trips") {
    SimConfig cfg;
    cfg.n = 200;
    const auto sim = simulate_cohort(cfg, 3);
    const auto p = temp_file("roundtrip.csv");
    write_csv(sim.cohort, p);
    const auto r = ingest_csv(p);
    REQUIRE(r.cohort.size() == 200);
    for (std::size_t i = 0; i < 200; ++i) {
      CHECK(r.cohort.records()[i].values == sim.cohort.records()[i].values);
      CHECK(r.cohort.outcomes()[i].time_days == sim.cohort.outcomes()[i].time_days);
      CHECK(r.cohort.outcomes()[i].event == sim.cohort.outcomes()[i].event);
    }
  }
}

TEST_CASE("simulator") {
  SUBCASE("n = 0 gives an empty cohort") {
    SimConfig cfg;
    cfg.n = 0;
    CHECK(simulate_cohort(cfg, 1).cohort.size() == 0);
  }
  SUBCASE("null coefficients without censoring follow the weibull curve") {
    SimConfig cfg;
    cfg.n = 20000;
    for (auto& [k, v] : cfg.coefficients) v = 0.0;
    cfg.event_fraction_target = 1.0;
    cfg.admin_followup_days = 0;
    const auto sim = simulate_cohort(cfg, 7);
    CHECK(sim.cohort.event_fraction() == 1.0);
    const auto km = kaplan_meier(sim.cohort.outcomes());
    double sup = 0;
    for (int t = 0; t <= 6000; ++t) {
      sup = std::max(sup, std::abs(km(t) - std::exp(-std::pow(t / cfg.weibull_scale_days, cfg.weibull_shape))));
    }
    CHECK(sup < 0.03);
  }
  SUBCASE("default configuration hits the event fraction") {
    const auto sim = simulate_cohort(SimConfig{}, 2024);
    CHECK(sim.cohort.size() == 12000);
    CHECK(sim.cohort.event_fraction() >= 0.53);
    CHECK(sim.cohort.event_fraction() <= 0.59);
    for (const auto& f : sim.cohort.features()) {
      const auto j = index_of(f.name);
      CHECK(sim.cohort.missing_rates()[j] >= 0.0);
      CHECK(sim.cohort.missing_rates()[j] <= 1.0);
    }
  }
  SUBCASE("fixed seed is bit-reproducible") {
    SimConfig cfg;
    cfg.n = 500;
    cfg.interactions.push_back({"mobilisation", "weight_loss", 0.4});
    cfg.late_noise_sd = 0.5;
    const auto a = simulate_cohort(cfg, 99);
    const auto b = simulate_cohort(cfg, 99);
    for (std::size_t i = 0; i < 500; ++i) {
      CHECK(a.cohort.records()[i].values == b.cohort.records()[i].values);
      CHECK(a.cohort.outcomes()[i].time_days == b.cohort.outcomes()[i].time_days);
    }
    CHECK(a.complete_features == b.complete_features);
    const auto c = simulate_cohort(cfg, 100);
    CHECK_FALSE(c.complete_features == a.complete_features);
  }
  SUBCASE("config json round trip") {
    SimConfig cfg;
    cfg.n = 77;
    cfg.interactions.push_back({"smoking", "age_value", -0.2});
    const auto back = sim_config_from_json(to_json(cfg));
    CHECK(to_json(back) == to_json(cfg));
  }
}
