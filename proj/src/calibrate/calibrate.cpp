#include "caresurv/calibrate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>

namespace caresurv {

HorizonLabels binarize_at_horizon(OutcomeSpan outcomes, int horizon_days) {
  if (horizon_days <= 0) throw ValidationError("horizon_days must be positive");
  HorizonLabels out;
  out.labels.resize(outcomes.size(), 0);
  out.included.resize(outcomes.size(), false);
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    const auto& o = outcomes[i];
    if (o.time_days > horizon_days) {
      out.labels[i] = 1;
      out.included[i] = true;
    } else if (o.event) {
      out.included[i] = true;
    } else {
      ++out.excluded;
    }
  }
  if (out.excluded == outcomes.size()) {
    throw ValidationError("every row is censored before the " + std::to_string(horizon_days) + "-day horizon");
  }
  return out;
}

namespace {

struct LogisticResult {
  double b0 = 0, b1 = 0;
  int iterations = 0;
  bool converged = false;
};

double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

double log1pexp(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

double logistic_nll(std::span<const double> x, std::span<const int> y, double b0, double b1) {
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double z = b0 + b1 * x[i];
    s += log1pexp(z) - (y[i] ? z : 0.0);
  }
  return s;
}

// P(y = 1 | x) = sigmoid(b0 + b1 x); Newton with step-halving.
LogisticResult fit_logistic(std::span<const double> x, std::span<const int> y, int max_iterations = 100) {
  LogisticResult r;
  double nll = logistic_nll(x, y, r.b0, r.b1);
  const double n = static_cast<double>(x.size());
  for (int it = 1; it <= max_iterations; ++it) {
    double g0 = 0, g1 = 0, h00 = 0, h01 = 0, h11 = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double p = sigmoid(r.b0 + r.b1 * x[i]);
      const double e = p - y[i];
      const double w = p * (1 - p);
      g0 += e;
      g1 += e * x[i];
      h00 += w;
      h01 += w * x[i];
      h11 += w * x[i] * x[i];
    }
    r.iterations = it;
    if (std::max(std::abs(g0), std::abs(g1)) < 1e-10 * n) {
      r.converged = true;
      break;
    }
    const double det = h00 * h11 - h01 * h01;
    double d0 = 0, d1 = 0;
    if (det > 1e-300) {
      d0 = (h11 * g0 - h01 * g1) / det;
      d1 = (h00 * g1 - h01 * g0) / det;
    } else {
      d0 = g0 / std::max(h00, 1e-12);
      d1 = 0;
    }
    double step = 1.0;
    bool moved = false;
    for (int k = 0; k < 40; ++k, step *= 0.5) {
      const double nb0 = r.b0 - step * d0, nb1 = r.b1 - step * d1;
      const double v = logistic_nll(x, y, nb0, nb1);
      if (v <= nll) {
        moved = nb0 != r.b0 || nb1 != r.b1;
        r.b0 = nb0;
        r.b1 = nb1;
        nll = v;
        break;
      }
    }
    if (!moved) {
      r.converged = std::max(std::abs(g0), std::abs(g1)) < 1e-6 * n;
      break;
    }
  }
  return r;
}

bool separated(std::span<const double> x, std::span<const int> y) {
  double max0 = -INFINITY, min0 = INFINITY, max1 = -INFINITY, min1 = INFINITY;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (y[i]) {
      max1 = std::max(max1, x[i]);
      min1 = std::min(min1, x[i]);
    } else {
      max0 = std::max(max0, x[i]);
      min0 = std::min(min0, x[i]);
    }
  }
  return max0 <= min1 || max1 <= min0;
}

}  // namespace

double PlattScaler::predict(double score) const { return 1.0 - sigmoid(a * score + b); }

PlattScaler fit_platt(std::span<const double> risk_scores, std::span<const int> labels, int horizon_days) {
  if (risk_scores.size() != labels.size()) throw ValidationError("platt: scores and labels differ in length");
  const auto alive = std::count(labels.begin(), labels.end(), 1);
  const auto dead = std::count(labels.begin(), labels.end(), 0);
  if (alive + dead != static_cast<std::ptrdiff_t>(labels.size())) throw ValidationError("platt: labels must be 0 or 1");
  if (alive == 0 || dead == 0) throw ValidationError("platt: labels contain a single class");

  const double n = static_cast<double>(risk_scores.size());
  double mean = 0;
  for (double s : risk_scores) mean += s;
  mean /= n;
  double var = 0;
  for (double s : risk_scores) var += (s - mean) * (s - mean);
  const double sd = var > 0 ? std::sqrt(var / n) : 1.0;
  std::vector<double> z(risk_scores.size());
  std::vector<int> died(labels.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    z[i] = (risk_scores[i] - mean) / sd;
    died[i] = 1 - labels[i];
  }
  const LogisticResult fit = fit_logistic(z, died);

  PlattScaler s;
  s.a = fit.b1 / sd;
  s.b = fit.b0 - fit.b1 * mean / sd;
  s.horizon_days = horizon_days;
  s.n_train = labels.size();
  s.iterations = fit.iterations;
  s.converged = fit.converged;
  if (separated(z, died)) {
    s.diagnostic = "scores separate the classes; coefficients stopped at the iteration bound";
  } else if (!fit.converged) {
    s.diagnostic = "Newton iterations did not converge";
  } else if (s.a < 0) {
    s.diagnostic = "negative slope: higher risk score maps to higher survival probability";
  }
  return s;
}

PlattScaler fit_platt_at_horizon(std::span<const double> risk_scores, OutcomeSpan outcomes, int horizon_days) {
  if (risk_scores.size() != outcomes.size()) throw ValidationError("platt: scores and outcomes differ in length");
  const HorizonLabels hl = binarize_at_horizon(outcomes, horizon_days);
  std::vector<double> s;
  std::vector<int> y;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    if (!hl.included[i]) continue;
    s.push_back(risk_scores[i]);
    y.push_back(hl.labels[i]);
  }
  PlattScaler p = fit_platt(s, y, horizon_days);
  p.n_excluded = hl.excluded;
  return p;
}

nlohmann::json PlattScaler::to_json() const {
  return {{"a", a},
          {"b", b},
          {"horizon_days", horizon_days},
          {"n_train", n_train},
          {"n_excluded", n_excluded},
          {"iterations", iterations},
          {"converged", converged},
          {"diagnostic", diagnostic}};
}

PlattScaler PlattScaler::from_json(const nlohmann::json& j) {
  try {
    PlattScaler s;
    j.at("a").get_to(s.a);
    j.at("b").get_to(s.b);
    j.at("horizon_days").get_to(s.horizon_days);
    s.n_train = j.value("n_train", std::size_t{0});
    s.n_excluded = j.value("n_excluded", std::size_t{0});
    s.iterations = j.value("iterations", 0);
    s.converged = j.value("converged", true);
    s.diagnostic = j.value("diagnostic", std::string{});
    if (!std::isfinite(s.a) || !std::isfinite(s.b) || s.horizon_days <= 0) {
      throw FormatError("platt scaler: invalid parameters");
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("platt scaler: ") + e.what());
  }
}

CalibrationCurve calibration_curve(std::span<const double> probs, std::span<const int> labels, int n_bins) {
  if (n_bins < 2) throw ValidationError("calibration curve needs at least 2 bins");
  if (probs.size() != labels.size()) throw ValidationError("calibration curve: probabilities and labels differ");
  const auto nb = static_cast<std::size_t>(n_bins);
  CalibrationCurve c;
  for (std::size_t k = 0; k <= nb; ++k) c.edges.push_back(static_cast<double>(k) / static_cast<double>(nb));
  c.mean_predicted.assign(nb, 0.0);
  c.observed_fraction.assign(nb, 0.0);
  c.counts.assign(nb, 0);
  c.histogram.assign(nb, 0);
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = probs[i];
    if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("calibration curve: probability outside [0, 1]");
    const auto k = std::min(nb - 1, static_cast<std::size_t>(p * static_cast<double>(nb)));
    ++c.histogram[k];
    ++c.counts[k];
    c.mean_predicted[k] += p;
    c.observed_fraction[k] += labels[i] == 1 ? 1.0 : 0.0;
  }
  c.empty.assign(nb, false);
  for (std::size_t k = 0; k < nb; ++k) {
    if (c.counts[k] == 0) {
      c.empty[k] = true;
      continue;
    }
    c.mean_predicted[k] /= static_cast<double>(c.counts[k]);
    c.observed_fraction[k] /= static_cast<double>(c.counts[k]);
  }
  return c;
}

nlohmann::json CalibrationCurve::to_json() const {
  nlohmann::json bins = nlohmann::json::array();
  for (std::size_t k = 0; k < counts.size(); ++k) {
    nlohmann::json b{{"lower", edges[k]}, {"upper", edges[k + 1]}, {"count", counts[k]}, {"empty", empty[k]}};
    b["mean_predicted"] = empty[k] ? nlohmann::json(nullptr) : nlohmann::json(mean_predicted[k]);
    b["observed_fraction"] = empty[k] ? nlohmann::json(nullptr) : nlohmann::json(observed_fraction[k]);
    bins.push_back(b);
  }
  return {{"edges", edges}, {"bins", bins}, {"histogram", histogram}};
}

void CalibrationCurve::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << "bin_lower,bin_upper,count,mean_predicted,observed_fraction\n" << std::setprecision(10);
  for (std::size_t k = 0; k < counts.size(); ++k) {
    out << edges[k] << ',' << edges[k + 1] << ',' << counts[k] << ',';
    if (!empty[k]) out << mean_predicted[k] << ',' << observed_fraction[k];
    else out << ',';
    out << '\n';
  }
}

CalibratedPrediction calibrated_predict(const FittedModel& model, const PlattScaler& scaler,
                                        std::span<const double> record, int horizon_days) {
  if (horizon_days != scaler.horizon_days) {
    throw ValidationError("scaler was fitted for a " + std::to_string(scaler.horizon_days) +
                          "-day horizon, requested " + std::to_string(horizon_days));
  }
  CalibratedPrediction p;
  p.horizon_days = horizon_days;
  p.risk_score = risk_score(model, record);
  p.probability = scaler.predict(p.risk_score);
  const double t = horizon_days;
  p.uncalibrated_survival = predict_survival_any(model, record, std::span<const double>(&t, 1)).survival[0];
  return p;
}

LogisticRecalibration logistic_recalibration(std::span<const double> probs, std::span<const int> labels) {
  if (probs.size() != labels.size()) throw ValidationError("recalibration: probabilities and labels differ");
  std::vector<double> x(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = std::clamp(probs[i], 1e-12, 1.0 - 1e-12);
    x[i] = std::log(p / (1 - p));
  }
  const LogisticResult r = fit_logistic(x, labels);
  return {r.b0, r.b1, r.converged};
}

}  // namespace caresurv
