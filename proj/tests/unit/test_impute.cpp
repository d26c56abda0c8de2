#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "caresurv/impute.hpp"
#include "support.hpp"

using namespace caresurv;

namespace {

FeatureSpec ordinal(const std::string& name, int lo, int hi) {
  FeatureSpec f;
  f.name = name;
  f.min_code = lo;
  f.max_code = hi;
  return f;
}

// Columns of codes (NaN = missing) into a cohort with one outcome per row.
Cohort make_cohort(const std::vector<FeatureSpec>& specs, const std::vector<std::vector<double>>& columns,
                   Outcomes outcomes = {}) {
  const std::size_t n = columns.empty() ? 0 : columns[0].size();
  std::vector<ResidentRecord> recs(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (const auto& c : columns) {
      recs[i].values.push_back(std::isnan(c[i]) ? std::nullopt : std::optional<double>(c[i]));
    }
  }
  if (outcomes.empty()) {
    for (std::size_t i = 0; i < n; ++i) outcomes.push_back(testing::death(static_cast<int>(i % 50) + 1));
  }
  return Cohort(specs, std::move(recs), std::move(outcomes));
}

std::vector<double> with_missing(std::vector<double> v, double rate, std::mt19937_64& rng) {
  std::bernoulli_distribution m(rate);
  for (auto& x : v) {
    if (m(rng)) x = NAN;
  }
  return v;
}

// Correlated ordinal columns: round(k + 2 z + noise) clipped to [0, 10].
std::vector<std::vector<double>> correlated_columns(std::size_t n, std::size_t p, double noise, std::mt19937_64& rng) {
  std::normal_distribution<double> z;
  std::vector<std::vector<double>> cols(p, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const double latent = z(rng);
    for (std::size_t j = 0; j < p; ++j) cols[j][i] = std::clamp(std::round(5 + 2 * latent + noise * z(rng)), 0.0, 10.0);
  }
  return cols;
}

}  // namespace

TEST_CASE("drop_sparse_features") {
  std::mt19937_64 rng(1);
  std::vector<double> full(100), sparse(100);
  for (int i = 0; i < 100; ++i) {
    full[static_cast<std::size_t>(i)] = i % 3;
    sparse[static_cast<std::size_t>(i)] = i < 20 ? 1.0 : NAN;
  }
  const auto c = make_cohort({ordinal("full", 0, 2), ordinal("sparse", 0, 2)}, {full, sparse});
  SUBCASE("eighty percent missing goes at 0.75") {
    const auto r = drop_sparse_features(c, 0.75);
    CHECK(r.dropped == std::vector<std::string>{"sparse"});
    CHECK(r.cohort.feature_names() == std::vector<std::string>{"full"});
  }
  SUBCASE("cutoff 1.0 keeps partially observed features") {
    CHECK(drop_sparse_features(c, 1.0).dropped.empty());
  }
  SUBCASE("rate equal to the cutoff is dropped") {
    CHECK(drop_sparse_features(c, 0.8).dropped == std::vector<std::string>{"sparse"});
  }
}

TEST_CASE("pairwise correlation") {
  std::vector<double> a{1, 2, 3, 4, NAN}, b{2, 4, 6, NAN, 1}, k{3, 3, 3, 3, 3};
  const auto c = make_cohort({ordinal("a", 0, 10), ordinal("b", 0, 10), ordinal("k", 0, 10)}, {a, b, k});
  const auto r = pairwise_correlation(c);
  CHECK(r(0, 1) == doctest::Approx(1.0));
  CHECK(r(0, 2) == 0.0);
  CHECK(r(2, 2) == 0.0);
  CHECK(r(0, 0) == doctest::Approx(1.0));
}

TEST_CASE("prune_correlated") {
  std::mt19937_64 rng(5);
  SUBCASE("duplicated column drops exactly one") {
    auto cols = correlated_columns(300, 1, 1.0, rng);
    cols.push_back(cols[0]);
    const auto r = prune_correlated(make_cohort({ordinal("x", 0, 10), ordinal("y", 0, 10)}, cols));
    CHECK(r.report.dropped.size() == 1);
    CHECK(r.report.surviving.size() == 1);
    CHECK(r.cohort.num_features() == 1);
  }
  SUBCASE("independent noise columns are kept") {
    std::uniform_int_distribution<int> u(0, 4);
    std::vector<std::vector<double>> cols(2, std::vector<double>(1000));
    for (auto& c : cols) {
      for (auto& v : c) v = u(rng);
    }
    const auto r = prune_correlated(make_cohort({ordinal("n1", 0, 4), ordinal("n2", 0, 4)}, cols));
    CHECK(r.report.dropped.empty());
  }
  SUBCASE("three correlated columns keep the best observed") {
    auto cols = correlated_columns(2000, 3, 0.6, rng);
    cols[0] = with_missing(cols[0], 0.05, rng);
    cols[1] = with_missing(cols[1], 0.15, rng);
    cols[2] = with_missing(cols[2], 0.30, rng);
    const auto c = make_cohort({ordinal("c_low", 0, 10), ordinal("a_mid", 0, 10), ordinal("b_high", 0, 10)}, cols);
    const auto corr = pairwise_correlation(c);
    REQUIRE(std::abs(corr(0, 1)) > 0.85);
    const auto r = prune_correlated(c);
    auto dropped = r.report.dropped;
    std::sort(dropped.begin(), dropped.end());
    CHECK(dropped == std::vector<std::string>{"a_mid", "b_high"});
    CHECK(r.report.surviving == std::vector<std::string>{"c_low"});
    for (const auto& s : r.report.steps) CHECK(s.rule == "missing_rate");
  }
  SUBCASE("equal missingness falls to the weaker cox coefficient") {
    std::normal_distribution<double> z;
    const std::size_t n = 1500;
    std::vector<double> strong(n), weak(n), eta(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double l = z(rng);
      strong[i] = std::clamp(std::round(5 + 2 * l), 0.0, 10.0);
      weak[i] = std::clamp(std::round(5 + 2 * l + 0.8 * z(rng)), 0.0, 10.0);
      eta[i] = 0.5 * strong[i];
    }
    const auto o = testing::exponential_outcomes(eta, 0.01, 0.0, rng);
    const auto r = prune_correlated(make_cohort({ordinal("a_weak", 0, 10), ordinal("z_strong", 0, 10)}, {weak, strong}, o));
    REQUIRE(r.report.steps.size() == 1);
    CHECK(r.report.steps[0].dropped == "a_weak");
    CHECK(r.report.steps[0].rule == "cox_coefficient");
  }
  SUBCASE("full tie falls to the later name") {
    auto cols = correlated_columns(100, 1, 1.0, rng);
    cols.push_back(cols[0]);
    const auto r = prune_correlated(make_cohort({ordinal("beta", 0, 10), ordinal("alpha", 0, 10)}, cols));
    REQUIRE(r.report.steps.size() == 1);
    CHECK(r.report.steps[0].dropped == "beta");
    CHECK(r.report.steps[0].rule == "name");
  }
  SUBCASE("constant feature never triggers pruning") {
    std::vector<double> k(200, 2.0), x(200);
    for (std::size_t i = 0; i < 200; ++i) x[i] = static_cast<double>(i % 5);
    CHECK(prune_correlated(make_cohort({ordinal("k", 0, 4), ordinal("x", 0, 4)}, {k, x})).report.dropped.empty());
  }
  SUBCASE("report invariants") {
    auto cols = correlated_columns(800, 5, 0.7, rng);
    std::vector<FeatureSpec> specs;
    for (int j = 0; j < 5; ++j) {
      specs.push_back(ordinal("f" + std::to_string(j), 0, 10));
      cols[static_cast<std::size_t>(j)] = with_missing(cols[static_cast<std::size_t>(j)], 0.02 * j, rng);
    }
    const auto r = prune_correlated(make_cohort(specs, cols));
    for (const auto& d : r.report.dropped) {
      CHECK(std::find(r.report.surviving.begin(), r.report.surviving.end(), d) == r.report.surviving.end());
    }
    for (const auto& s : r.report.steps) CHECK(std::abs(s.correlation) >= 0.7);
    CHECK(r.report.dropped.size() + r.report.surviving.size() == 5);
    const auto j = r.report.to_json();
    CHECK(j.at("dropped").size() == r.report.dropped.size());
  }
}

TEST_CASE("mice") {
  std::mt19937_64 rng(9);
  SUBCASE("complete cohort is unchanged") {
    const auto cols = correlated_columns(50, 3, 1.0, rng);
    const auto c = make_cohort({ordinal("a", 0, 10), ordinal("b", 0, 10), ordinal("c", 0, 10)}, cols);
    const auto out = mice_impute(c, 10, 1);
    for (std::size_t i = 0; i < c.size(); ++i) CHECK(out.records()[i].values == c.records()[i].values);
  }
  SUBCASE("missing cell in a constant column gets the constant") {
    std::vector<double> k(40, 3.0), x(40);
    for (std::size_t i = 0; i < 40; ++i) x[i] = static_cast<double>(i % 7);
    k[5] = NAN;
    const auto out = mice_impute(make_cohort({ordinal("k", 0, 9), ordinal("x", 0, 9)}, {k, x}), 10, 1);
    CHECK(out.records()[5].values[0] == 3.0);
  }
  SUBCASE("a feature with no observed values is rejected") {
    std::vector<double> none(10, NAN), x(10, 1.0);
    CHECK_THROWS_AS(mice_impute(make_cohort({ordinal("none", 0, 3), ordinal("x", 0, 3)}, {none, x})), ValidationError);
  }
  SUBCASE("no fully observed feature is rejected") {
    std::vector<double> a{1, NAN, 2, 3}, b{NAN, 1, 2, 3};
    CHECK_THROWS_AS(mice_impute(make_cohort({ordinal("a", 0, 3), ordinal("b", 0, 3)}, {a, b})), ValidationError);
  }
  SUBCASE("beats median imputation on correlated features") {
    const auto truth = correlated_columns(3000, 5, 0.8, rng);
    std::vector<std::vector<double>> cols(6);
    std::vector<FeatureSpec> specs;
    for (std::size_t j = 0; j < 5; ++j) {
      cols[j] = with_missing(truth[j], 0.2, rng);
      specs.push_back(ordinal("v" + std::to_string(j), 0, 10));
    }
    std::uniform_int_distribution<int> u(0, 3);
    cols[5].resize(3000);
    for (auto& v : cols[5]) v = u(rng);
    specs.push_back(ordinal("anchor", 0, 3));
    const auto c = make_cohort(specs, cols);
    const auto out = mice_impute(c, 10, 17);
    double se_mice = 0, se_median = 0;
    std::size_t count = 0;
    for (std::size_t j = 0; j < 5; ++j) {
      std::vector<double> obs;
      for (double v : cols[j]) {
        if (!std::isnan(v)) obs.push_back(v);
      }
      std::sort(obs.begin(), obs.end());
      const double med = obs[(obs.size() - 1) / 2];
      for (std::size_t i = 0; i < 3000; ++i) {
        const auto& got = out.records()[i].values[j];
        REQUIRE(got.has_value());
        if (!std::isnan(cols[j][i])) {
          CHECK(*got == cols[j][i]);
          continue;
        }
        CHECK(*got >= 0);
        CHECK(*got <= 10);
        CHECK(*got == std::round(*got));
        se_mice += (*got - truth[j][i]) * (*got - truth[j][i]);
        se_median += (med - truth[j][i]) * (med - truth[j][i]);
        ++count;
      }
    }
    REQUIRE(count > 0);
    CHECK(std::sqrt(se_mice / count) < std::sqrt(se_median / count));
    CHECK(out.complete());
  }
  SUBCASE("deterministic in the seed and reusable on new rows") {
    const auto truth = correlated_columns(600, 4, 0.8, rng);
    std::vector<std::vector<double>> cols(4);
    std::vector<FeatureSpec> specs;
    for (std::size_t j = 0; j < 4; ++j) {
      cols[j] = j == 0 ? truth[j] : with_missing(truth[j], 0.25, rng);
      specs.push_back(ordinal("v" + std::to_string(j), 0, 10));
    }
    const auto c = make_cohort(specs, cols);
    const auto a = fit_mice(c, 5, 3);
    const auto b = fit_mice(c, 5, 3);
    for (std::size_t i = 0; i < c.size(); ++i) CHECK(a.completed.records()[i].values == b.completed.records()[i].values);
    CHECK(a.models.models.size() == 3);
    CHECK(a.models.model_for(0) == nullptr);

    const auto restored = ImputationModelSet::from_json(a.models.to_json());
    CHECK(restored.to_json() == a.models.to_json());
    ResidentRecord partial{{4.0, std::nullopt, 6.0, std::nullopt}};
    const auto x = a.models.apply(partial, 11);
    const auto y = restored.apply(partial, 11);
    CHECK(x.values == y.values);
    CHECK(x.complete());
    CHECK(x.values[0] == 4.0);
    CHECK(x.values[2] == 6.0);
  }
}
