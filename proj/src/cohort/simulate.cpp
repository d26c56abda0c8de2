#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "caresurv/cohort.hpp"

namespace caresurv {

namespace {

using Counts = std::vector<std::pair<int, double>>;

std::vector<std::pair<int, double>> normalise(const Counts& counts) {
  // Merge duplicate codes (e.g. "No" and "Unsure" both map to 0).
  std::map<int, double> merged;
  for (const auto& [code, n] : counts) merged[code] += n;
  double total = 0.0;
  for (const auto& [code, n] : merged) total += n;
  std::vector<std::pair<int, double>> out;
  for (const auto& [code, n] : merged) out.emplace_back(code, n / total);
  return out;
}

// Distribution of a weighted sum of independent indicators, clipped to [lo, hi].
std::vector<std::pair<int, double>> weighted_bernoulli_sum(const std::vector<std::pair<double, int>>& items, int lo,
                                                           int hi) {
  int min_sum = 0;
  int max_sum = 0;
  for (const auto& [p, w] : items) {
    if (w < 0) min_sum += w; else max_sum += w;
  }
  const int offset = -min_sum;
  std::vector<double> dist(static_cast<std::size_t>(max_sum - min_sum + 1), 0.0);
  dist[static_cast<std::size_t>(offset)] = 1.0;
  for (const auto& [p, w] : items) {
    std::vector<double> next(dist.size(), 0.0);
    for (std::size_t s = 0; s < dist.size(); ++s) {
      if (dist[s] == 0.0) continue;
      next[s] += dist[s] * (1.0 - p);
      next[static_cast<std::size_t>(static_cast<int>(s) + w)] += dist[s] * p;
    }
    dist = std::move(next);
  }
  std::map<int, double> clipped;
  for (std::size_t s = 0; s < dist.size(); ++s) {
    if (dist[s] == 0.0) continue;
    clipped[std::clamp(static_cast<int>(s) - offset, lo, hi)] += dist[s];
  }
  return {clipped.begin(), clipped.end()};
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

int invert_categorical(const std::vector<std::pair<int, double>>& dist, double u) {
  double acc = 0.0;
  for (const auto& [code, p] : dist) {
    acc += p;
    if (u < acc) return code;
  }
  return dist.back().first;
}

double marginal_mean(const std::vector<std::pair<int, double>>& dist) {
  double m = 0.0;
  for (const auto& [code, p] : dist) m += code * p;
  return m;
}

}  // namespace

std::vector<std::pair<int, double>> simulation_marginal(Feature f) {
  switch (f) {
    case Feature::kAge:
      return normalise({{67, 248}, {72, 645}, {77, 1435}, {82, 2445}, {87, 3255}, {92, 2725}, {97, 1060}, {100, 130}});
    case Feature::kGenderMale: return normalise({{0, 7200 + 167 + 82}, {1, 4494}});
    case Feature::kFallsHistory: return normalise({{0, 5125}, {1, 5270}, {2, 477}, {3, 306}});
    case Feature::kChessScale: return normalise({{0, 1446}, {1, 1512}, {2, 1444}, {3, 793}, {4, 385}, {5, 65}});
    case Feature::kRxRisk: {
      // Rx-Risk category prevalence among residents with a medicine chart, and
      // the category weights; rare categories ("<50") take 25 residents.
      const double n = 9065.0;
      const std::vector<std::pair<double, int>> items = {
          {7151 / n, 3},  {3080 / n, 6}, {2383 / n, 2}, {1751 / n, -1}, {1693 / n, 2}, {1449 / n, 2},
          {1132 / n, 1},  {1030 / n, -1}, {958 / n, 1}, {932 / n, 2},   {772 / n, -1}, {757 / n, 2},
          {636 / n, 2},   {581 / n, 2},  {540 / n, -1}, {498 / n, 2},  {403 / n, 1},  {325 / n, 2},
          {325 / n, 2},   {321 / n, -1}, {308 / n, -1}, {306 / n, 3},  {59 / n, 6},   {59 / n, 6},
          {25 / n, 2},    {25 / n, -1},  {25 / n, -1},  {25 / n, 3},   {25 / n, 4},   {25 / n, 6}};
      return weighted_bernoulli_sum(items, -3, 23);
    }
    case Feature::kSpecificHealthConditions: {
      const double n = 11944.0;
      return weighted_bernoulli_sum({{5179 / n, 1}, {3658 / n, 1}, {1301 / n, 1}, {1289 / n, 1}, {1112 / n, 1}}, 0, 5);
    }
    case Feature::kCognitivePerformance:
      return normalise({{0, 639}, {1, 538}, {2, 2127}, {3, 1527}, {4, 199}, {5, 426}, {6, 99}});
    case Feature::kDepressionRating: return normalise({{0, 2609}, {1, 1729}, {2, 909}, {3, 308}});
    case Feature::kWeightLoss: return normalise({{0, 4379 + 5242}, {1, 1650}});
    case Feature::kPoorEating: return normalise({{0, 9136}, {1, 2135}});
    case Feature::kMobilisation: return normalise({{0, 4175}, {1, 1889}, {2, 2395}, {3, 921}, {4, 1153}});
    case Feature::kMobilityEquipment:
      return normalise({{0, 2698}, {1, 813}, {2, 5083}, {3, 586}, {4, 220}, {5, 1130}});
    case Feature::kSmoking: return normalise({{0, 7604}, {1, 1950}});
    case Feature::kSleepAssist: return normalise({{0, 3861}, {1, 6631}});
    case Feature::kSkinIntegrity: return normalise({{0, 170 + 2609}, {1, 157}, {2, 530}});
    case Feature::kPressureUlcerRisk: return normalise({{0, 2629}, {1, 1967}, {2, 554}, {3, 349}, {4, 34}});
    case Feature::kFaecalIncontinence: return normalise({{0, 3093}, {1, 2187}});
    case Feature::kUrinaryIncontinence: return normalise({{0, 3808}, {1, 1554}});
    case Feature::kCount: break;
  }
  throw ValidationError("no marginal for feature");
}

std::map<std::string, double> SimConfig::default_coefficients() {
  return {{"age_value", 0.035},
          {"gender_male", 0.35},
          {"falls_history", 0.05},
          {"chess_scale_score", 0.18},
          {"rx_risk_score", 0.04},
          {"specific_health_conditions", 0.15},
          {"cognitive_performance_scale_score", 0.06},
          {"depression_rating_scale_score", 0.03},
          {"weight_loss", 0.2},
          {"poor_eating_or_lack_of_appetite", 0.35},
          {"mobilisation", 0.18},
          {"mobility_equipment", 0.04},
          {"smoking", 0.05},
          {"sleep_assist", 0.1},
          {"skin_integrity_score", 0.08},
          {"pressure_ulcer_risk_score", 0.15},
          {"faecal_incontinence", 0.1},
          {"urinary_incontinence", 0.05}};
}

// Missing fractions as reported for the assessment items.
std::map<std::string, double> SimConfig::default_missing_rates() {
  return {{"age_value", 0.0},
          {"gender_male", 0.0},
          {"falls_history", 0.064},
          {"chess_scale_score", 0.527},
          {"rx_risk_score", 0.241},
          {"specific_health_conditions", 0.0},
          {"cognitive_performance_scale_score", 0.535},
          {"depression_rating_scale_score", 0.535},
          {"weight_loss", 0.056},
          {"poor_eating_or_lack_of_appetite", 0.056},
          {"mobilisation", 0.118},
          {"mobility_equipment", 0.118},
          {"smoking", 0.20},
          {"sleep_assist", 0.122},
          {"skin_integrity_score", 0.71},
          {"pressure_ulcer_risk_score", 0.537},
          {"faecal_incontinence", 0.558},
          {"urinary_incontinence", 0.551}};
}

SimConfig sim_config_from_json(const nlohmann::json& j) {
  SimConfig c;
  c.n = j.value("n", c.n);
  if (j.contains("coefficients")) {
    for (const auto& [k, v] : j.at("coefficients").items()) c.coefficients[k] = v.get<double>();
  }
  if (j.contains("interactions")) {
    for (const auto& t : j.at("interactions")) {
      c.interactions.push_back({t.at("first").get<std::string>(), t.at("second").get<std::string>(),
                                t.at("coefficient").get<double>()});
    }
  }
  c.weibull_shape = j.value("weibull_shape", c.weibull_shape);
  c.weibull_scale_days = j.value("weibull_scale_days", c.weibull_scale_days);
  c.event_fraction_target = j.value("event_fraction_target", c.event_fraction_target);
  c.event_fraction_tolerance = j.value("event_fraction_tolerance", c.event_fraction_tolerance);
  c.admin_followup_days = j.value("admin_followup_days", c.admin_followup_days);
  if (j.contains("missing_rates")) {
    for (const auto& [k, v] : j.at("missing_rates").items()) c.missing_rates[k] = v.get<double>();
  }
  c.latent_loading = j.value("latent_loading", c.latent_loading);
  c.late_noise_sd = j.value("late_noise_sd", c.late_noise_sd);
  c.late_noise_onset_days = j.value("late_noise_onset_days", c.late_noise_onset_days);
  c.max_tuning_iterations = j.value("max_tuning_iterations", c.max_tuning_iterations);
  return c;
}

nlohmann::json to_json(const SimConfig& c) {
  nlohmann::json j;
  j["n"] = c.n;
  j["coefficients"] = c.coefficients;
  j["interactions"] = nlohmann::json::array();
  for (const auto& t : c.interactions) {
    j["interactions"].push_back({{"first", t.first}, {"second", t.second}, {"coefficient", t.coefficient}});
  }
  j["weibull_shape"] = c.weibull_shape;
  j["weibull_scale_days"] = c.weibull_scale_days;
  j["event_fraction_target"] = c.event_fraction_target;
  j["event_fraction_tolerance"] = c.event_fraction_tolerance;
  j["admin_followup_days"] = c.admin_followup_days;
  j["missing_rates"] = c.missing_rates;
  j["latent_loading"] = c.latent_loading;
  j["late_noise_sd"] = c.late_noise_sd;
  j["late_noise_onset_days"] = c.late_noise_onset_days;
  j["max_tuning_iterations"] = c.max_tuning_iterations;
  return j;
}

double GroundTruth::linear_predictor(std::span<const double> x) const {
  double eta = 0.0;
  for (std::size_t j = 0; j < coefficients.size(); ++j) eta += coefficients[j] * (x[j] - centers[j]);
  for (const auto& t : interactions) {
    eta += t.coefficient * (x[t.first] - centers[t.first]) * (x[t.second] - centers[t.second]);
  }
  return eta;
}

double GroundTruth::baseline_cumulative_hazard(double t) const {
  if (t <= 0.0) return 0.0;
  return std::pow(t / weibull_scale_days, weibull_shape);
}

double GroundTruth::survival(std::span<const double> x, double t) const {
  const double eta = linear_predictor(x);
  const double h = baseline_cumulative_hazard(t);
  if (late_noise_sd <= 0.0 || t <= late_noise_onset_days) return std::exp(-h * std::exp(eta));
  const double h0 = baseline_cumulative_hazard(late_noise_onset_days);
  const double early = std::exp(-h0 * std::exp(eta));
  // E over the standard-normal shock by trapezoidal quadrature on [-8, 8].
  constexpr int kNodes = 641;
  constexpr double kLo = -8.0;
  constexpr double kStep = 16.0 / (kNodes - 1);
  double acc = 0.0;
  for (int k = 0; k < kNodes; ++k) {
    const double z = kLo + k * kStep;
    const double w = (k == 0 || k == kNodes - 1) ? 0.5 : 1.0;
    const double density = std::exp(-0.5 * z * z) / std::sqrt(2.0 * M_PI);
    acc += w * density * std::exp(-(h - h0) * std::exp(eta + late_noise_sd * z));
  }
  return early * acc * kStep;
}

SimulationResult simulate_cohort(const SimConfig& config, std::uint64_t seed) {
  const auto& schema = canonical_schema();
  const std::size_t p = schema.size();
  const std::size_t n = config.n;
  if (config.weibull_shape <= 0.0 || config.weibull_scale_days <= 0.0) {
    throw ValidationError("Weibull shape and scale must be positive");
  }
  if (config.latent_loading < 0.0 || config.latent_loading >= 1.0) {
    throw ValidationError("latent_loading must lie in [0, 1)");
  }

  std::vector<std::vector<std::pair<int, double>>> marginals(p);
  GroundTruth truth;
  truth.coefficients.assign(p, 0.0);
  truth.centers.assign(p, 0.0);
  for (std::size_t j = 0; j < p; ++j) {
    marginals[j] = simulation_marginal(static_cast<Feature>(j));
    truth.centers[j] = marginal_mean(marginals[j]);
  }
  for (const auto& [name, beta] : config.coefficients) {
    auto j = find_feature(schema, name);
    if (!j) throw ValidationError("coefficient for unknown feature '" + name + "'");
    truth.coefficients[*j] = beta;
  }
  for (const auto& t : config.interactions) {
    auto a = find_feature(schema, t.first);
    auto b = find_feature(schema, t.second);
    if (!a || !b) throw ValidationError("interaction names unknown feature " + t.first + " x " + t.second);
    truth.interactions.push_back({*a, *b, t.coefficient});
  }
  truth.weibull_shape = config.weibull_shape;
  truth.weibull_scale_days = config.weibull_scale_days;
  truth.late_noise_sd = config.late_noise_sd;
  truth.late_noise_onset_days = config.late_noise_onset_days;

  std::vector<double> missing_rate(p, 0.0);
  for (const auto& [name, rate] : config.missing_rates) {
    auto j = find_feature(schema, name);
    if (!j) throw ValidationError("missing rate for unknown feature '" + name + "'");
    if (rate < 0.0 || rate > 1.0) throw ValidationError("missing rate for " + name + " outside [0, 1]");
    missing_rate[*j] = rate;
  }

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::exponential_distribution<double> expo(1.0);

  const double loading = config.latent_loading;
  const double idio = std::sqrt(1.0 - loading * loading);
  const std::size_t gender = static_cast<std::size_t>(Feature::kGenderMale);
  constexpr double kMaxDays = 1.0e6;

  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p));
  std::vector<double> event_time(n), censor_draw(n), reason_draw(n);
  std::vector<int> admin_time(n, std::numeric_limits<int>::max());
  std::vector<std::vector<double>> missing_draw(n, std::vector<double>(p));
  std::vector<double> row(p);

  for (std::size_t i = 0; i < n; ++i) {
    const double latent = normal(rng);
    for (std::size_t j = 0; j < p; ++j) {
      const double load = (j == gender) ? 0.0 : loading;
      const double w = load * latent + (j == gender ? 1.0 : idio) * normal(rng);
      row[j] = invert_categorical(marginals[j], normal_cdf(w));
      x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = row[j];
    }
    const double eta = truth.linear_predictor(row);
    const double e = expo(rng);
    const double shock = normal(rng);
    // Invert the cumulative hazard; past the onset the log-hazard carries the shock.
    const double scale = config.weibull_scale_days;
    const double shape = config.weibull_shape;
    double t = scale * std::pow(e * std::exp(-eta), 1.0 / shape);
    if (config.late_noise_sd > 0.0 && t > config.late_noise_onset_days) {
      const double h0 = truth.baseline_cumulative_hazard(config.late_noise_onset_days);
      const double used = h0 * std::exp(eta);
      const double rest = (e - used) * std::exp(-(eta + config.late_noise_sd * shock));
      t = scale * std::pow(h0 + rest, 1.0 / shape);
    }
    event_time[i] = std::min(std::max(1.0, std::ceil(t)), kMaxDays);
    censor_draw[i] = expo(rng);
    const double admin_u = unif(rng);
    if (config.admin_followup_days > 0) {
      admin_time[i] = 1 + static_cast<int>(std::floor(admin_u * config.admin_followup_days));
      admin_time[i] = std::min(admin_time[i], config.admin_followup_days);
    }
    reason_draw[i] = unif(rng);
    for (std::size_t j = 0; j < p; ++j) missing_draw[i][j] = unif(rng);
  }

  // Observed outcome under random-censoring rate `lambda` (0 = none).
  auto observe = [&](std::size_t i, double lambda, int& time, bool& event, bool& admin) {
    double c = static_cast<double>(admin_time[i]);
    admin = true;
    if (lambda > 0.0) {
      const double cr = std::max(1.0, std::ceil(censor_draw[i] / lambda));
      if (cr < c) {
        c = cr;
        admin = false;
      }
    }
    event = event_time[i] <= c;
    time = static_cast<int>(event ? event_time[i] : c);
  };
  auto event_fraction = [&](double lambda) {
    if (n == 0) return 0.0;
    std::size_t events = 0;
    for (std::size_t i = 0; i < n; ++i) {
      int time;
      bool ev, admin;
      observe(i, lambda, time, ev, admin);
      events += ev ? 1 : 0;
    }
    return static_cast<double>(events) / static_cast<double>(n);
  };

  double lambda = 0.0;
  double achieved = event_fraction(0.0);
  const double target = config.event_fraction_target;
  const double tol = config.event_fraction_tolerance;
  if (n > 0 && target < 1.0) {
    if (achieved < target - tol) {
      throw ConvergenceError("event fraction target " + std::to_string(target) +
                             " unreachable: administrative censoring alone gives " + std::to_string(achieved));
    }
    if (achieved > target) {
      double lo = 0.0;
      double hi = 1e-4;
      int iter = 0;
      while (event_fraction(hi) > target && iter++ < config.max_tuning_iterations) hi *= 2.0;
      for (; iter < config.max_tuning_iterations; ++iter) {
        const double mid = 0.5 * (lo + hi);
        const double f = event_fraction(mid);
        if (std::abs(f - target) <= tol / 4.0) {
          lo = hi = mid;
          break;
        }
        if (f > target) lo = mid; else hi = mid;
      }
      lambda = 0.5 * (lo + hi);
      achieved = event_fraction(lambda);
    }
    if (std::abs(achieved - target) > tol) {
      throw ConvergenceError("censoring tuning stopped at event fraction " + std::to_string(achieved) +
                             " (target " + std::to_string(target) + ")");
    }
  }

  std::vector<ResidentRecord> records(n);
  Outcomes outcomes(n);
  // Non-administrative discharges split as transfer:home:hospital = 1145:351:244.
  const double total_other = 1145.0 + 351.0 + 244.0;
  for (std::size_t i = 0; i < n; ++i) {
    auto& o = outcomes[i];
    bool admin = false;
    observe(i, lambda, o.time_days, o.event, admin);
    if (o.event) {
      o.reason = CensorReason::kNone;
    } else if (admin) {
      o.reason = CensorReason::kCurrentResident;
    } else if (reason_draw[i] < 1145.0 / total_other) {
      o.reason = CensorReason::kTransferFacility;
    } else if (reason_draw[i] < (1145.0 + 351.0) / total_other) {
      o.reason = CensorReason::kDischargedHome;
    } else {
      o.reason = CensorReason::kTransferHospital;
    }
    records[i].values.resize(p);
    for (std::size_t j = 0; j < p; ++j) {
      if (missing_draw[i][j] >= missing_rate[j]) {
        records[i].values[j] = x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      }
    }
  }

  SimulationResult result;
  result.cohort = Cohort(schema, std::move(records), std::move(outcomes));
  result.truth = std::move(truth);
  result.complete_features = std::move(x);
  result.achieved_event_fraction = n > 0 ? achieved : 0.0;
  return result;
}

}  // namespace caresurv
