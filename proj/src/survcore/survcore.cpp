#include "caresurv/survcore.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace caresurv {

double StepFunction::operator()(double t) const {
  auto it = std::upper_bound(knots.begin(), knots.end(), t);
  if (it == knots.begin()) return initial;
  return values[static_cast<std::size_t>(it - knots.begin()) - 1];
}

double StepFunction::left_limit(double t) const {
  auto it = std::lower_bound(knots.begin(), knots.end(), t);
  if (it == knots.begin()) return initial;
  return values[static_cast<std::size_t>(it - knots.begin()) - 1];
}

std::vector<double> StepFunction::evaluate(std::span<const double> times) const {
  std::vector<double> out;
  out.reserve(times.size());
  for (double t : times) out.push_back((*this)(t));
  return out;
}

TimeGroups::TimeGroups(OutcomeSpan outcomes) {
  order.resize(outcomes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return outcomes[a].time_days < outcomes[b].time_days; });
  std::size_t i = 0;
  while (i < order.size()) {
    Group g;
    g.time = outcomes[order[i]].time_days;
    g.begin = i;
    while (i < order.size() && outcomes[order[i]].time_days == g.time) {
      if (outcomes[order[i]].event) ++g.deaths;
      ++i;
    }
    g.end = i;
    total_deaths += g.deaths;
    groups.push_back(g);
  }
}

namespace {

// Product-limit or cumulative-hazard estimator; `censoring` swaps the roles of
// events and censorings.
StepFunction estimator(OutcomeSpan outcomes, bool product_limit, bool censoring) {
  TimeGroups tg(outcomes);
  StepFunction f;
  f.initial = product_limit ? 1.0 : 0.0;
  double value = f.initial;
  std::size_t at_risk = outcomes.size();
  for (const auto& g : tg.groups) {
    const std::size_t size = g.end - g.begin;
    const std::size_t d = censoring ? size - g.deaths : g.deaths;
    if (d > 0) {
      const double ratio = static_cast<double>(d) / static_cast<double>(at_risk);
      value = product_limit ? value * (1.0 - ratio) : value + ratio;
      f.knots.push_back(g.time);
      f.values.push_back(value);
    }
    at_risk -= size;
  }
  return f;
}

double clip_score(double r, std::size_t& clipped) {
  if (r > kScoreClip) {
    ++clipped;
    return kScoreClip;
  }
  if (r < -kScoreClip) {
    ++clipped;
    return -kScoreClip;
  }
  return r;
}

}  // namespace

StepFunction kaplan_meier(OutcomeSpan outcomes) { return estimator(outcomes, true, false); }
StepFunction nelson_aalen(OutcomeSpan outcomes) { return estimator(outcomes, false, false); }
StepFunction censoring_kaplan_meier(OutcomeSpan outcomes) { return estimator(outcomes, true, true); }

BreslowResult breslow_baseline(OutcomeSpan outcomes, std::span<const double> risk_scores) {
  if (risk_scores.size() != outcomes.size()) throw ValidationError("breslow: scores and outcomes differ in length");
  BreslowResult result;
  std::vector<double> r(risk_scores.size());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = clip_score(risk_scores[i], result.clipped_scores);
  const double shift = r.empty() ? 0.0 : *std::max_element(r.begin(), r.end());

  TimeGroups tg(outcomes);
  // Risk-set sums S0 at each group, accumulated from the latest time backwards.
  std::vector<double> s0(tg.groups.size());
  double acc = 0.0;
  for (std::size_t k = tg.groups.size(); k-- > 0;) {
    const auto& g = tg.groups[k];
    for (std::size_t i = g.begin; i < g.end; ++i) acc += std::exp(r[tg.order[i]] - shift);
    s0[k] = acc;
  }
  double h = 0.0;
  for (std::size_t k = 0; k < tg.groups.size(); ++k) {
    const auto& g = tg.groups[k];
    if (g.deaths == 0) continue;
    h += static_cast<double>(g.deaths) / s0[k] * std::exp(-shift);
    result.cumulative_hazard.knots.push_back(g.time);
    result.cumulative_hazard.values.push_back(h);
  }
  return result;
}

PartialLikelihood cox_partial_likelihood(const Eigen::MatrixXd& x, OutcomeSpan outcomes, const Eigen::VectorXd& beta,
                                         bool with_hessian) {
  const Eigen::Index p = x.cols();
  if (static_cast<std::size_t>(x.rows()) != outcomes.size()) {
    throw ValidationError("partial likelihood: design rows and outcomes differ");
  }
  const Eigen::VectorXd eta = x * beta;
  const double shift = eta.size() ? eta.maxCoeff() : 0.0;
  TimeGroups tg(outcomes);

  PartialLikelihood out;
  out.gradient = Eigen::VectorXd::Zero(p);
  if (with_hessian) out.hessian = Eigen::MatrixXd::Zero(p, p);
  double s0 = 0.0;
  Eigen::VectorXd s1 = Eigen::VectorXd::Zero(p);
  Eigen::MatrixXd s2 = with_hessian ? Eigen::MatrixXd::Zero(p, p) : Eigen::MatrixXd();
  for (std::size_t k = tg.groups.size(); k-- > 0;) {
    const auto& g = tg.groups[k];
    Eigen::VectorXd death_x = Eigen::VectorXd::Zero(p);
    double death_eta = 0.0;
    for (std::size_t i = g.begin; i < g.end; ++i) {
      const auto row = static_cast<Eigen::Index>(tg.order[i]);
      const double w = std::exp(eta[row] - shift);
      s0 += w;
      s1.noalias() += w * x.row(row).transpose();
      if (with_hessian) s2.selfadjointView<Eigen::Lower>().rankUpdate(x.row(row).transpose(), w);
      if (outcomes[tg.order[i]].event) {
        death_x += x.row(row).transpose();
        death_eta += eta[row];
      }
    }
    if (g.deaths == 0) continue;
    const double d = static_cast<double>(g.deaths);
    out.log_likelihood += death_eta - d * (std::log(s0) + shift);
    const Eigen::VectorXd mean = s1 / s0;
    out.gradient += death_x - d * mean;
    if (with_hessian) {
      Eigen::MatrixXd s2full = s2.selfadjointView<Eigen::Lower>();
      out.hessian -= d * (s2full / s0 - mean * mean.transpose());
    }
  }
  return out;
}

double cox_log_likelihood(std::span<const double> margins, const TimeGroups& tg, OutcomeSpan outcomes) {
  const double shift = margins.empty() ? 0.0 : *std::max_element(margins.begin(), margins.end());
  double s0 = 0.0;
  double ll = 0.0;
  for (std::size_t k = tg.groups.size(); k-- > 0;) {
    const auto& g = tg.groups[k];
    double death_eta = 0.0;
    for (std::size_t i = g.begin; i < g.end; ++i) {
      const std::size_t row = tg.order[i];
      s0 += std::exp(margins[row] - shift);
      if (outcomes[row].event) death_eta += margins[row];
    }
    if (g.deaths > 0) ll += death_eta - static_cast<double>(g.deaths) * (std::log(s0) + shift);
  }
  return ll;
}

MarginDerivatives cox_margin_derivatives(std::span<const double> margins, const TimeGroups& tg,
                                         OutcomeSpan outcomes) {
  const std::size_t n = margins.size();
  const double shift = margins.empty() ? 0.0 : *std::max_element(margins.begin(), margins.end());
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = std::exp(margins[i] - shift);

  const std::size_t m = tg.groups.size();
  std::vector<double> s0(m);
  double acc = 0.0;
  MarginDerivatives out;
  for (std::size_t k = m; k-- > 0;) {
    const auto& g = tg.groups[k];
    double death_eta = 0.0;
    for (std::size_t i = g.begin; i < g.end; ++i) {
      acc += w[tg.order[i]];
      if (outcomes[tg.order[i]].event) death_eta += margins[tg.order[i]];
    }
    s0[k] = acc;
    if (g.deaths > 0) out.log_likelihood += death_eta - static_cast<double>(g.deaths) * (std::log(acc) + shift);
  }
  out.gradient.resize(n);
  out.hessian.resize(n);
  double a = 0.0;  // sum over event times <= t of d / S0
  double b = 0.0;  // sum over event times <= t of d / S0^2
  for (std::size_t k = 0; k < m; ++k) {
    const auto& g = tg.groups[k];
    if (g.deaths > 0) {
      const double d = static_cast<double>(g.deaths);
      a += d / s0[k];
      b += d / (s0[k] * s0[k]);
    }
    for (std::size_t i = g.begin; i < g.end; ++i) {
      const std::size_t row = tg.order[i];
      const double wi = w[row];
      out.gradient[row] = (outcomes[row].event ? 1.0 : 0.0) - wi * a;
      out.hessian[row] = wi * a - wi * wi * b;
    }
  }
  return out;
}

double CoxModel::risk_score(std::span<const double> x) const {
  if (static_cast<Eigen::Index>(x.size()) != coefficients.size()) {
    throw ValidationError("risk score: expected " + std::to_string(coefficients.size()) + " features, got " +
                          std::to_string(x.size()));
  }
  double r = 0.0;
  for (Eigen::Index j = 0; j < coefficients.size(); ++j) {
    r += coefficients[j] * (x[static_cast<std::size_t>(j)] - standardization.mean[j]) / standardization.scale[j];
  }
  return r;
}

Eigen::VectorXd CoxModel::original_scale_coefficients() const {
  return coefficients.cwiseQuotient(standardization.scale);
}

namespace {

void check_inputs(const Eigen::MatrixXd& x, OutcomeSpan outcomes, const std::vector<std::string>& names) {
  if (static_cast<std::size_t>(x.rows()) != outcomes.size()) {
    throw ValidationError("design has " + std::to_string(x.rows()) + " rows but " + std::to_string(outcomes.size()) +
                          " outcomes");
  }
  if (static_cast<std::size_t>(x.cols()) != names.size()) {
    throw ValidationError("design has " + std::to_string(x.cols()) + " columns but " + std::to_string(names.size()) +
                          " feature names");
  }
  const auto events = std::count_if(outcomes.begin(), outcomes.end(), [](const auto& o) { return o.event; });
  if (events < 2) throw ValidationError("Cox model needs at least 2 events, got " + std::to_string(events));
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    if (x.col(j).maxCoeff() == x.col(j).minCoeff()) {
      throw ValidationError("feature '" + names[static_cast<std::size_t>(j)] + "' has zero variance");
    }
  }
}

Standardization make_standardization(const Eigen::MatrixXd& x, bool scale) {
  Standardization s;
  s.mean = x.colwise().mean().transpose();
  s.scale = Eigen::VectorXd::Ones(x.cols());
  if (scale) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const double var = (x.col(j).array() - s.mean[j]).square().mean();
      s.scale[j] = std::sqrt(var);
    }
  }
  return s;
}

Eigen::MatrixXd apply_standardization(const Eigen::MatrixXd& x, const Standardization& s) {
  Eigen::MatrixXd z = x.rowwise() - s.mean.transpose();
  for (Eigen::Index j = 0; j < z.cols(); ++j) z.col(j) /= s.scale[j];
  return z;
}

void attach_baseline(CoxModel& model, const Eigen::MatrixXd& z, OutcomeSpan outcomes) {
  const Eigen::VectorXd r = z * model.coefficients;
  auto b = breslow_baseline(outcomes, std::span<const double>(r.data(), static_cast<std::size_t>(r.size())));
  model.baseline_hazard = std::move(b.cumulative_hazard);
  model.clipped_scores = b.clipped_scores;
}

}  // namespace

CoxModel fit_coxph(const Eigen::MatrixXd& x, OutcomeSpan outcomes, std::vector<std::string> feature_names,
                   const CoxOptions& options) {
  check_inputs(x, outcomes, feature_names);
  CoxModel model;
  model.feature_names = std::move(feature_names);
  model.standardization = make_standardization(x, false);
  const Eigen::MatrixXd z = apply_standardization(x, model.standardization);
  const Eigen::Index p = x.cols();

  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  PartialLikelihood cur = cox_partial_likelihood(z, outcomes, beta);
  auto& conv = model.convergence;
  conv.objective_trace.push_back(cur.log_likelihood);
  for (int iter = 0;; ++iter) {
    conv.iterations = iter;
    conv.gradient_max_norm = cur.gradient.cwiseAbs().maxCoeff();
    if (conv.gradient_max_norm < options.gradient_tolerance) {
      conv.converged = true;
      break;
    }
    if (iter >= options.max_iterations) break;
    Eigen::MatrixXd info = -cur.hessian;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(info);
    Eigen::VectorXd step = ldlt.solve(cur.gradient);
    if (ldlt.info() != Eigen::Success || !step.allFinite() || step.dot(cur.gradient) <= 0.0) {
      info.diagonal().array() += 1e-8 * (1.0 + info.diagonal().cwiseAbs().maxCoeff());
      step = info.ldlt().solve(cur.gradient);
    }
    bool accepted = false;
    double scale = 1.0;
    for (int halving = 0; halving < 50; ++halving, scale *= 0.5) {
      Eigen::VectorXd trial = beta + scale * step;
      PartialLikelihood next = cox_partial_likelihood(z, outcomes, trial);
      // Near the optimum the gain falls below rounding in the log-likelihood;
      // there a step that shrinks the gradient is taken as an improvement.
      const double rounding = 64 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(cur.log_likelihood));
      const bool improves = next.log_likelihood >= cur.log_likelihood ||
                            (next.log_likelihood >= cur.log_likelihood - rounding &&
                             next.gradient.cwiseAbs().maxCoeff() < cur.gradient.cwiseAbs().maxCoeff());
      if (std::isfinite(next.log_likelihood) && improves) {
        beta = std::move(trial);
        cur = std::move(next);
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      conv.diagnostic = "step-halving failed to improve the partial likelihood";
      break;
    }
    conv.objective_trace.push_back(cur.log_likelihood);
  }
  if (conv.converged) {
    // The gradient also vanishes as a coefficient runs off to infinity under
    // separation; there the likelihood keeps rising along that coordinate.
    for (Eigen::Index j = 0; j < p; ++j) {
      const double sd = std::sqrt((z.col(j).array() - z.col(j).mean()).square().mean());
      if (std::abs(beta[j]) * sd <= 5.0) continue;
      Eigen::VectorXd further = beta;
      further[j] *= 2.0;
      const double ll = cox_partial_likelihood(z, outcomes, further, false).log_likelihood;
      if (ll >= cur.log_likelihood - 1e-9) {
        conv.converged = false;
        conv.diagnostic = "partial likelihood still increases as '" + model.feature_names[static_cast<std::size_t>(j)] +
                          "' grows";
      }
    }
  }
  if (!conv.converged) {
    Eigen::Index worst = 0;
    beta.cwiseAbs().maxCoeff(&worst);
    std::ostringstream msg;
    msg << "Cox fit did not converge after " << conv.iterations << " iterations (max |gradient| "
        << conv.gradient_max_norm << ")";
    if (!conv.diagnostic.empty()) msg << ": " << conv.diagnostic;
    msg << "; largest coefficient '" << model.feature_names[static_cast<std::size_t>(worst)]
        << "' = " << beta[worst] << " (possible monotone likelihood / separation)";
    throw CoxConvergenceError(msg.str(), beta);
  }
  model.coefficients = beta;
  attach_baseline(model, z, outcomes);
  return model;
}

PenaltyParams penalty_preset(PenaltyPreset preset) {
  PenaltyParams p;
  switch (preset) {
    case PenaltyPreset::kElastic:
      p.preset = "elastic";
      p.alpha = 0.00034;
      p.l1_ratio = 1.0;
      break;
    case PenaltyPreset::kRidge:
      p.preset = "ridge";
      p.alpha = 2.24e-6;
      p.l1_ratio = 1e-100;
      break;
    case PenaltyPreset::kLasso:
      p.preset = "lasso";
      p.l1_ratio = 0.9;
      p.alpha_min_ratio = 0.01;
      break;
  }
  return p;
}

namespace {

// Per-coordinate first and second derivative of the log partial likelihood
// at linear predictor eta, plus the log-likelihood itself.
struct CoordinateStats {
  double gradient = 0.0;
  double curvature = 0.0;  // -d2 loglik / d beta_j^2
};

class CoordinateEngine {
 public:
  CoordinateEngine(const Eigen::MatrixXd& z, OutcomeSpan outcomes) : z_(z), outcomes_(outcomes), tg_(outcomes) {}

  const TimeGroups& groups() const { return tg_; }

  double log_likelihood(const Eigen::VectorXd& eta) const {
    return cox_log_likelihood(std::span<const double>(eta.data(), static_cast<std::size_t>(eta.size())), tg_,
                              outcomes_);
  }

  CoordinateStats stats(const Eigen::VectorXd& eta, Eigen::Index j) const {
    const double shift = eta.maxCoeff();
    double s0 = 0.0, s1 = 0.0, s2 = 0.0;
    CoordinateStats st;
    for (std::size_t k = tg_.groups.size(); k-- > 0;) {
      const auto& g = tg_.groups[k];
      double death_x = 0.0;
      for (std::size_t i = g.begin; i < g.end; ++i) {
        const auto row = static_cast<Eigen::Index>(tg_.order[i]);
        const double w = std::exp(eta[row] - shift);
        const double v = z_(row, j);
        s0 += w;
        s1 += w * v;
        s2 += w * v * v;
        if (outcomes_[tg_.order[i]].event) death_x += v;
      }
      if (g.deaths == 0) continue;
      const double d = static_cast<double>(g.deaths);
      const double mean = s1 / s0;
      st.gradient += death_x - d * mean;
      st.curvature += d * (s2 / s0 - mean * mean);
    }
    return st;
  }

 private:
  const Eigen::MatrixXd& z_;
  OutcomeSpan outcomes_;
  TimeGroups tg_;
};

double soft_threshold(double v, double t) {
  if (v > t) return v - t;
  if (v < -t) return v + t;
  return 0.0;
}

double penalty_value(const Eigen::VectorXd& beta, double alpha, double l1) {
  return alpha * (l1 * beta.cwiseAbs().sum() + 0.5 * (1.0 - l1) * beta.squaredNorm());
}

}  // namespace

double penalized_alpha_max(const Eigen::MatrixXd& x, OutcomeSpan outcomes, double l1_ratio, bool standardize) {
  if (l1_ratio <= 0.0) throw ValidationError("alpha_max requires a positive l1_ratio");
  const Standardization s = make_standardization(x, standardize);
  const Eigen::MatrixXd z = apply_standardization(x, s);
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(x.cols());
  const auto pl = cox_partial_likelihood(z, outcomes, zero, false);
  return pl.gradient.cwiseAbs().maxCoeff() / static_cast<double>(x.rows()) / l1_ratio;
}

CoxModel fit_penalized_cox(const Eigen::MatrixXd& x, OutcomeSpan outcomes, std::vector<std::string> feature_names,
                           const PenaltyParams& params) {
  check_inputs(x, outcomes, feature_names);
  if (params.l1_ratio < 0.0 || params.l1_ratio > 1.0) throw ValidationError("l1_ratio must lie in [0, 1]");
  CoxModel model;
  model.feature_names = std::move(feature_names);
  model.standardization = make_standardization(x, params.standardize);
  const Eigen::MatrixXd z = apply_standardization(x, model.standardization);
  const Eigen::Index p = x.cols();
  const double n = static_cast<double>(x.rows());

  double alpha = params.alpha;
  if (params.alpha_min_ratio) {
    alpha = *params.alpha_min_ratio * penalized_alpha_max(x, outcomes, params.l1_ratio, params.standardize);
  }
  if (!(alpha >= 0.0)) throw ValidationError("alpha must be non-negative");
  const double l1 = params.l1_ratio;
  const double lam1 = alpha * l1;
  const double lam2 = alpha * (1.0 - l1);

  CoordinateEngine engine(z, outcomes);
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  Eigen::VectorXd eta = Eigen::VectorXd::Zero(x.rows());
  double ll = engine.log_likelihood(eta);
  double objective = -ll / n + penalty_value(beta, alpha, l1);
  auto& conv = model.convergence;
  conv.objective_trace.push_back(objective);

  for (int sweep = 1; sweep <= params.max_sweeps; ++sweep) {
    double max_change = 0.0;
    for (Eigen::Index j = 0; j < p; ++j) {
      const CoordinateStats st = engine.stats(eta, j);
      const double a = st.curvature / n;
      const double b = st.gradient / n;
      if (a <= 0.0) continue;
      const double target = soft_threshold(a * beta[j] + b, lam1) / (a + lam2);
      double delta = target - beta[j];
      if (delta == 0.0) continue;
      const double old_pen = lam1 * std::abs(beta[j]) + 0.5 * lam2 * beta[j] * beta[j];
      const double old_obj_j = -ll / n + old_pen;
      for (int halving = 0; halving < 30; ++halving, delta *= 0.5) {
        const double nb = beta[j] + delta;
        Eigen::VectorXd trial = eta + delta * z.col(j);
        const double trial_ll = engine.log_likelihood(trial);
        const double new_obj_j = -trial_ll / n + lam1 * std::abs(nb) + 0.5 * lam2 * nb * nb;
        if (new_obj_j <= old_obj_j) {
          beta[j] = nb;
          eta = std::move(trial);
          ll = trial_ll;
          max_change = std::max(max_change, std::abs(delta) * std::sqrt(a));
          break;
        }
      }
    }
    objective = -ll / n + penalty_value(beta, alpha, l1);
    conv.objective_trace.push_back(objective);
    conv.iterations = sweep;
    if (max_change < params.tolerance) {
      conv.converged = true;
      break;
    }
  }
  // KKT residual on the standardised scale.
  const auto pl = cox_partial_likelihood(z, outcomes, beta, false);
  double kkt = 0.0;
  for (Eigen::Index j = 0; j < p; ++j) {
    const double g = -pl.gradient[j] / n + lam2 * beta[j];
    const double r = beta[j] != 0.0 ? std::abs(g + lam1 * (beta[j] > 0 ? 1.0 : -1.0))
                                    : std::max(0.0, std::abs(g) - lam1);
    kkt = std::max(kkt, r);
  }
  conv.gradient_max_norm = kkt;
  if (!conv.converged) conv.diagnostic = "coordinate descent reached the sweep limit";

  model.coefficients = beta;
  model.penalty = PenaltyInfo{params.preset, alpha, l1};
  attach_baseline(model, z, outcomes);
  return model;
}

SurvivalCurve predict_survival(const CoxModel& model, std::span<const double> x, std::span<const double> times) {
  std::size_t clipped = 0;
  const double r = clip_score(model.risk_score(x), clipped);
  SurvivalCurve curve;
  curve.times.assign(times.begin(), times.end());
  curve.survival.reserve(times.size());
  const double er = std::exp(r);
  for (double t : times) curve.survival.push_back(std::exp(-model.baseline_hazard(t) * er));
  return curve;
}

}  // namespace caresurv
