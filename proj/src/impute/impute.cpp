#include "caresurv/impute.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include "caresurv/survcore.hpp"
#include "caresurv/util.hpp"

namespace caresurv {

SparseDropResult drop_sparse_features(const Cohort& cohort, double max_missing_fraction) {
  if (!(max_missing_fraction > 0.0 && max_missing_fraction <= 1.0)) {
    throw ValidationError("max_missing_fraction must lie in (0, 1]");
  }
  SparseDropResult out;
  std::vector<std::size_t> keep;
  for (std::size_t j = 0; j < cohort.num_features(); ++j) {
    if (cohort.missing_rates()[j] >= max_missing_fraction) {
      out.dropped.push_back(cohort.features()[j].name);
    } else {
      keep.push_back(j);
    }
  }
  out.cohort = cohort.select_features(keep);
  return out;
}

Eigen::MatrixXd pairwise_correlation(const Cohort& cohort) {
  const std::size_t p = cohort.num_features();
  const auto& recs = cohort.records();
  Eigen::MatrixXd r = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(p));
  for (std::size_t a = 0; a < p; ++a) {
    for (std::size_t b = a + 1; b < p; ++b) {
      double n = 0, sa = 0, sb = 0;
      for (const auto& rec : recs) {
        if (rec.values[a] && rec.values[b]) {
          n += 1;
          sa += *rec.values[a];
          sb += *rec.values[b];
        }
      }
      double value = 0.0;
      if (n >= 2) {
        const double ma = sa / n, mb = sb / n;
        double caa = 0, cbb = 0, cab = 0;
        for (const auto& rec : recs) {
          if (rec.values[a] && rec.values[b]) {
            const double da = *rec.values[a] - ma, db = *rec.values[b] - mb;
            caa += da * da;
            cbb += db * db;
            cab += da * db;
          }
        }
        if (caa > 0 && cbb > 0) value = std::clamp(cab / std::sqrt(caa * cbb), -1.0, 1.0);
      }
      r(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = value;
      r(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(a)) = value;
    }
    // A constant column correlates with nothing, itself included.
    bool constant = true;
    std::optional<double> first;
    for (const auto& rec : recs) {
      if (!rec.values[a]) continue;
      if (!first) first = rec.values[a];
      else if (*rec.values[a] != *first) {
        constant = false;
        break;
      }
    }
    if (constant) r(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(a)) = 0.0;
  }
  return r;
}

namespace {

double univariate_cox_coefficient(const Cohort& cohort, std::size_t j) {
  std::vector<double> x;
  Outcomes outs;
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    if (const auto& v = cohort.records()[i].values[j]) {
      x.push_back(*v);
      outs.push_back(cohort.outcomes()[i]);
    }
  }
  try {
    Eigen::MatrixXd m = Eigen::Map<Eigen::MatrixXd>(x.data(), static_cast<Eigen::Index>(x.size()), 1);
    return fit_coxph(m, outs, {cohort.features()[j].name}).coefficients[0];
  } catch (const std::exception&) {
    return 0.0;
  }
}

}  // namespace

PruneResult prune_correlated(const Cohort& cohort, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ValidationError("correlation threshold must lie in (0, 1)");
  const std::size_t p = cohort.num_features();
  PruneResult out;
  auto& rep = out.report;
  rep.threshold = threshold;
  rep.feature_names = cohort.feature_names();
  rep.correlation = pairwise_correlation(cohort);

  struct Pair {
    std::size_t a, b;
    double r;
  };
  std::vector<Pair> pairs;
  for (std::size_t a = 0; a < p; ++a) {
    for (std::size_t b = a + 1; b < p; ++b) {
      const double r = std::abs(rep.correlation(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)));
      if (r >= threshold) pairs.push_back({a, b, r});
    }
  }
  std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& x, const Pair& y) { return x.r > y.r; });

  std::vector<bool> alive(p, true);
  std::map<std::size_t, double> cox_cache;
  auto cox_abs = [&](std::size_t j) {
    auto it = cox_cache.find(j);
    if (it == cox_cache.end()) it = cox_cache.emplace(j, std::abs(univariate_cox_coefficient(cohort, j))).first;
    return it->second;
  };
  const auto& rates = cohort.missing_rates();
  for (const auto& pr : pairs) {
    if (!alive[pr.a] || !alive[pr.b]) continue;
    std::size_t drop = 0;
    std::string rule;
    if (rates[pr.a] != rates[pr.b]) {
      drop = rates[pr.a] > rates[pr.b] ? pr.a : pr.b;
      rule = "missing_rate";
    } else if (cox_abs(pr.a) != cox_abs(pr.b)) {
      drop = cox_abs(pr.a) < cox_abs(pr.b) ? pr.a : pr.b;
      rule = "cox_coefficient";
    } else {
      drop = rep.feature_names[pr.a] > rep.feature_names[pr.b] ? pr.a : pr.b;
      rule = "name";
    }
    const std::size_t keep = drop == pr.a ? pr.b : pr.a;
    alive[drop] = false;
    rep.steps.push_back({rep.feature_names[drop], rep.feature_names[keep], pr.r, rule});
  }
  std::vector<std::size_t> keep_idx;
  for (std::size_t j = 0; j < p; ++j) {
    if (alive[j]) {
      keep_idx.push_back(j);
      rep.surviving.push_back(rep.feature_names[j]);
    } else {
      rep.dropped.push_back(rep.feature_names[j]);
    }
  }
  out.cohort = cohort.select_features(keep_idx);
  return out;
}

nlohmann::json PruneReport::to_json() const {
  nlohmann::json j;
  j["threshold"] = threshold;
  j["dropped"] = dropped;
  j["surviving"] = surviving;
  j["feature_names"] = feature_names;
  auto& m = j["correlation"] = nlohmann::json::array();
  for (Eigen::Index a = 0; a < correlation.rows(); ++a) {
    std::vector<double> row(static_cast<std::size_t>(correlation.cols()));
    for (Eigen::Index b = 0; b < correlation.cols(); ++b) row[static_cast<std::size_t>(b)] = correlation(a, b);
    m.push_back(row);
  }
  auto& s = j["steps"] = nlohmann::json::array();
  for (const auto& st : steps) {
    s.push_back({{"dropped", st.dropped}, {"kept", st.kept}, {"abs_correlation", st.correlation}, {"rule", st.rule}});
  }
  return j;
}

// ---------------------------------------------------------------------------
// Chained equations

namespace {

double clip_to_spec(double v, int lo, int hi) { return std::clamp(std::round(v), double(lo), double(hi)); }

double predict(const ConditionalModel& m, std::span<const double> row) {
  double y = m.coefficients[0];
  for (std::size_t k = 0; k < m.predictors.size(); ++k) {
    y += m.coefficients[static_cast<Eigen::Index>(k + 1)] * row[m.predictors[k]];
  }
  return y;
}

// Uniform pick among the `k` donors whose predictions are nearest to `y`.
double match_donor(const ConditionalModel& m, double y, std::size_t k, std::mt19937_64& rng) {
  const auto& dp = m.donor_predictions;
  const std::size_t n = dp.size();
  k = std::min(k, n);
  std::size_t hi = static_cast<std::size_t>(std::lower_bound(dp.begin(), dp.end(), y) - dp.begin());
  std::size_t lo = hi;  // candidates are [lo, hi)
  while (hi - lo < k) {
    if (lo == 0) {
      ++hi;
    } else if (hi == n) {
      --lo;
    } else if (y - dp[lo - 1] <= dp[hi] - y) {
      --lo;
    } else {
      ++hi;
    }
  }
  std::uniform_int_distribution<std::size_t> pick(lo, hi - 1);
  return m.donor_values[pick(rng)];
}

ConditionalModel fit_conditional(const Eigen::MatrixXd& x, const std::vector<std::vector<bool>>& observed,
                                 std::size_t j) {
  const auto p = static_cast<std::size_t>(x.cols());
  ConditionalModel m;
  m.feature = j;
  for (std::size_t k = 0; k < p; ++k) {
    if (k != j) m.predictors.push_back(k);
  }
  const std::size_t q = m.predictors.size() + 1;
  Eigen::MatrixXd xtx = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(q));
  Eigen::VectorXd xty = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(q));
  Eigen::VectorXd row(static_cast<Eigen::Index>(q));
  std::vector<Eigen::Index> donors;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    if (!observed[j][static_cast<std::size_t>(i)]) continue;
    donors.push_back(i);
    row[0] = 1.0;
    for (std::size_t k = 0; k < m.predictors.size(); ++k) {
      row[static_cast<Eigen::Index>(k + 1)] = x(i, static_cast<Eigen::Index>(m.predictors[k]));
    }
    xtx.selfadjointView<Eigen::Lower>().rankUpdate(row);
    xty += row * x(i, static_cast<Eigen::Index>(j));
  }
  Eigen::MatrixXd a = xtx.selfadjointView<Eigen::Lower>();
  const double ridge = 1e-8 * (a.trace() / static_cast<double>(q) + 1.0);
  for (Eigen::Index k = 1; k < a.rows(); ++k) a(k, k) += ridge;
  m.coefficients = a.ldlt().solve(xty);

  std::vector<std::pair<double, double>> pool;
  pool.reserve(donors.size());
  std::vector<double> buf(p);
  for (auto i : donors) {
    for (std::size_t k = 0; k < p; ++k) buf[k] = x(i, static_cast<Eigen::Index>(k));
    pool.emplace_back(predict(m, buf), x(i, static_cast<Eigen::Index>(j)));
  }
  std::stable_sort(pool.begin(), pool.end(), [](const auto& l, const auto& r) { return l.first < r.first; });
  for (const auto& [pred, value] : pool) {
    m.donor_predictions.push_back(pred);
    m.donor_values.push_back(value);
  }
  return m;
}

}  // namespace

const ConditionalModel* ImputationModelSet::model_for(std::size_t feature) const {
  for (const auto& m : models) {
    if (m.feature == feature) return &m;
  }
  return nullptr;
}

MiceResult fit_mice(const Cohort& cohort, int cycles, std::uint64_t seed) {
  if (cycles < 1) throw ValidationError("MICE needs at least one cycle");
  const std::size_t n = cohort.size();
  const std::size_t p = cohort.num_features();
  const auto& rates = cohort.missing_rates();

  MiceResult out;
  auto& set = out.models;
  set.feature_names = cohort.feature_names();
  set.cycles = cycles;
  set.seed = seed;
  set.donors = kPmmDonors;
  for (const auto& f : cohort.features()) {
    set.min_codes.push_back(f.min_code);
    set.max_codes.push_back(f.max_code);
  }

  std::vector<std::vector<bool>> observed(p, std::vector<bool>(n, false));
  bool any_missing = false;
  bool any_complete = false;
  for (std::size_t j = 0; j < p; ++j) {
    std::vector<double> vals;
    for (std::size_t i = 0; i < n; ++i) {
      if (const auto& v = cohort.records()[i].values[j]) {
        observed[j][i] = true;
        vals.push_back(*v);
      }
    }
    if (vals.empty() && n > 0) {
      throw ValidationError("feature '" + set.feature_names[j] + "' has no observed values; drop it before imputation");
    }
    double median = 0.0;
    if (!vals.empty()) {
      auto mid = vals.begin() + static_cast<std::ptrdiff_t>((vals.size() - 1) / 2);
      std::nth_element(vals.begin(), mid, vals.end());
      median = *mid;
    }
    set.medians.push_back(median);
    if (rates[j] > 0.0) any_missing = true;
    else any_complete = true;
  }
  if (!any_missing) {
    out.completed = cohort;
    return out;
  }
  if (!any_complete) throw ValidationError("MICE needs at least one fully observed feature");

  for (std::size_t j = 0; j < p; ++j) {
    if (rates[j] > 0.0) set.visit_order.push_back(j);
  }
  std::stable_sort(set.visit_order.begin(), set.visit_order.end(),
                   [&](std::size_t a, std::size_t b) { return rates[a] < rates[b]; });

  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < p; ++j) {
      const auto& v = cohort.records()[i].values[j];
      x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v ? *v : set.medians[j];
    }
  }

  std::mt19937_64 rng(seed);
  std::vector<double> buf(p);
  for (int c = 0; c < cycles; ++c) {
    const bool last = c + 1 == cycles;
    for (std::size_t j : set.visit_order) {
      ConditionalModel m = fit_conditional(x, observed, j);
      for (std::size_t i = 0; i < n; ++i) {
        if (observed[j][i]) continue;
        for (std::size_t k = 0; k < p; ++k) buf[k] = x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k));
        const double v = match_donor(m, predict(m, buf), set.donors, rng);
        x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
            clip_to_spec(v, set.min_codes[j], set.max_codes[j]);
      }
      if (last) set.models.push_back(std::move(m));
    }
  }

  std::vector<ResidentRecord> recs(n);
  for (std::size_t i = 0; i < n; ++i) {
    recs[i].values.resize(p);
    for (std::size_t j = 0; j < p; ++j) recs[i].values[j] = x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  }
  out.completed = cohort.with_records(std::move(recs));
  return out;
}

Cohort mice_impute(const Cohort& cohort, int cycles, std::uint64_t seed) {
  return fit_mice(cohort, cycles, seed).completed;
}

ResidentRecord ImputationModelSet::apply(const ResidentRecord& record, std::uint64_t stream_seed) const {
  const std::size_t p = feature_names.size();
  if (record.values.size() != p) {
    throw ValidationError("record has " + std::to_string(record.values.size()) + " fields, imputation models expect " +
                          std::to_string(p));
  }
  std::vector<double> row(p);
  std::vector<bool> missing(p, false);
  for (std::size_t j = 0; j < p; ++j) {
    missing[j] = !record.values[j].has_value();
    row[j] = missing[j] ? medians[j] : *record.values[j];
  }
  if (std::find(missing.begin(), missing.end(), true) == missing.end()) return record;
  std::mt19937_64 rng(stream_seed);
  for (int c = 0; c < cycles; ++c) {
    for (std::size_t j : visit_order) {
      if (!missing[j]) continue;
      const ConditionalModel* m = model_for(j);
      if (!m || m->donor_values.empty()) continue;
      row[j] = clip_to_spec(match_donor(*m, predict(*m, row), donors, rng), min_codes[j], max_codes[j]);
    }
  }
  ResidentRecord out;
  out.values.assign(row.begin(), row.end());
  return out;
}

Cohort ImputationModelSet::apply(const Cohort& cohort) const {
  if (cohort.feature_names() != feature_names) {
    throw ValidationError("cohort features do not match the imputation models");
  }
  std::vector<ResidentRecord> recs;
  recs.reserve(cohort.size());
  for (std::size_t i = 0; i < cohort.size(); ++i) recs.push_back(apply(cohort.records()[i], derive_seed(seed, i)));
  return cohort.with_records(std::move(recs));
}

nlohmann::json ImputationModelSet::to_json() const {
  nlohmann::json j;
  j["feature_names"] = feature_names;
  j["min_codes"] = min_codes;
  j["max_codes"] = max_codes;
  j["medians"] = medians;
  j["visit_order"] = visit_order;
  j["cycles"] = cycles;
  j["seed"] = seed;
  j["donors"] = donors;
  auto& ms = j["models"] = nlohmann::json::array();
  for (const auto& m : models) {
    std::vector<double> coef(m.coefficients.data(), m.coefficients.data() + m.coefficients.size());
    ms.push_back({{"feature", m.feature},
                  {"predictors", m.predictors},
                  {"coefficients", coef},
                  {"donor_predictions", pack_doubles(m.donor_predictions)},
                  {"donor_values", pack_doubles(m.donor_values)}});
  }
  return j;
}

ImputationModelSet ImputationModelSet::from_json(const nlohmann::json& j) {
  try {
    ImputationModelSet s;
    j.at("feature_names").get_to(s.feature_names);
    j.at("min_codes").get_to(s.min_codes);
    j.at("max_codes").get_to(s.max_codes);
    j.at("medians").get_to(s.medians);
    j.at("visit_order").get_to(s.visit_order);
    j.at("cycles").get_to(s.cycles);
    j.at("seed").get_to(s.seed);
    j.at("donors").get_to(s.donors);
    const std::size_t p = s.feature_names.size();
    if (s.min_codes.size() != p || s.max_codes.size() != p || s.medians.size() != p) {
      throw FormatError("imputation models: per-feature arrays disagree in length");
    }
    for (const auto& mj : j.at("models")) {
      ConditionalModel m;
      mj.at("feature").get_to(m.feature);
      mj.at("predictors").get_to(m.predictors);
      const auto coef = mj.at("coefficients").get<std::vector<double>>();
      m.coefficients = Eigen::Map<const Eigen::VectorXd>(coef.data(), static_cast<Eigen::Index>(coef.size()));
      m.donor_predictions = unpack_doubles(mj.at("donor_predictions").get<std::string>());
      m.donor_values = unpack_doubles(mj.at("donor_values").get<std::string>());
      if (m.feature >= p || m.coefficients.size() != static_cast<Eigen::Index>(m.predictors.size() + 1) ||
          m.donor_predictions.size() != m.donor_values.size() ||
          std::any_of(m.predictors.begin(), m.predictors.end(), [&](std::size_t k) { return k >= p; })) {
        throw FormatError("imputation models: inconsistent conditional model");
      }
      s.models.push_back(std::move(m));
    }
    for (auto v : s.visit_order) {
      if (v >= p) throw FormatError("imputation models: visit order out of range");
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("imputation models: ") + e.what());
  }
}

}  // namespace caresurv
