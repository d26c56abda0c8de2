#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "caresurv/error.hpp"
#include "caresurv/outcome.hpp"

namespace caresurv {

/// Right-continuous step function: value(t) = values[k] for the last knot
/// k with knots[k] <= t, and `initial` before the first knot.
struct StepFunction {
  std::vector<double> knots;
  std::vector<double> values;
  double initial = 0.0;

  double operator()(double t) const;
  // Value just before t (the left limit).
  double left_limit(double t) const;
  std::vector<double> evaluate(std::span<const double> times) const;
  bool empty() const { return knots.empty(); }
};

struct SurvivalCurve {
  std::vector<double> times;
  std::vector<double> survival;
};

/// Distinct observed times in ascending order with the rows observed at each.
struct TimeGroups {
  struct Group {
    double time = 0.0;
    std::size_t begin = 0;  // range into `order`
    std::size_t end = 0;
    std::size_t deaths = 0;
  };
  std::vector<std::size_t> order;  // rows sorted by ascending time
  std::vector<Group> groups;
  std::size_t total_deaths = 0;

  explicit TimeGroups(OutcomeSpan outcomes);
};

StepFunction kaplan_meier(OutcomeSpan outcomes);
StepFunction nelson_aalen(OutcomeSpan outcomes);
// Kaplan-Meier of the censoring distribution (censoring treated as the event).
StepFunction censoring_kaplan_meier(OutcomeSpan outcomes);

inline constexpr double kScoreClip = 30.0;

struct BreslowResult {
  StepFunction cumulative_hazard;
  std::size_t clipped_scores = 0;
};

/// H0(t) = sum over event times t_j <= t of d_j / sum_{k at risk} exp(r_k);
/// scores are clipped to +-30 before exponentiation.
BreslowResult breslow_baseline(OutcomeSpan outcomes, std::span<const double> risk_scores);

// ---------------------------------------------------------------------------
// Breslow partial likelihood

struct PartialLikelihood {
  double log_likelihood = 0.0;
  Eigen::VectorXd gradient;
  Eigen::MatrixXd hessian;  // of the log-likelihood (negative semi-definite)
};

PartialLikelihood cox_partial_likelihood(const Eigen::MatrixXd& x, OutcomeSpan outcomes, const Eigen::VectorXd& beta,
                                         bool with_hessian = true);

/// Log partial likelihood of per-row margins and its derivatives in each margin:
/// gradient[i] = d loglik / d f_i, hessian[i] = -d^2 loglik / d f_i^2.
struct MarginDerivatives {
  double log_likelihood = 0.0;
  std::vector<double> gradient;
  std::vector<double> hessian;
};

double cox_log_likelihood(std::span<const double> margins, const TimeGroups& groups, OutcomeSpan outcomes);
MarginDerivatives cox_margin_derivatives(std::span<const double> margins, const TimeGroups& groups,
                                         OutcomeSpan outcomes);

// ---------------------------------------------------------------------------
// Cox models

struct Standardization {
  Eigen::VectorXd mean;
  Eigen::VectorXd scale;  // ones when only centred
};

struct ConvergenceReport {
  int iterations = 0;
  double gradient_max_norm = 0.0;
  bool converged = false;
  std::vector<double> objective_trace;
  std::string diagnostic;
};

struct PenaltyInfo {
  std::string preset;
  double alpha = 0.0;
  double l1_ratio = 0.0;
};

/// Fitted (optionally penalised) Cox model. Risk score r(x) = beta' x~ with
/// x~ = (x - mean) / scale.
struct CoxModel {
  std::vector<std::string> feature_names;
  Eigen::VectorXd coefficients;  // on the x~ scale
  Standardization standardization;
  StepFunction baseline_hazard;
  std::size_t clipped_scores = 0;
  ConvergenceReport convergence;
  std::optional<PenaltyInfo> penalty;

  double risk_score(std::span<const double> x) const;
  // Coefficients per unit of the raw feature.
  Eigen::VectorXd original_scale_coefficients() const;
};

class CoxConvergenceError : public ConvergenceError {
 public:
  CoxConvergenceError(const std::string& what, Eigen::VectorXd last_iterate)
      : ConvergenceError(what), last_iterate_(std::move(last_iterate)) {}
  const Eigen::VectorXd& last_iterate() const { return last_iterate_; }

 private:
  Eigen::VectorXd last_iterate_;
};

struct CoxOptions {
  int max_iterations = 100;
  double gradient_tolerance = 1e-6;
};

/// Newton-Raphson with step-halving on the Breslow partial likelihood.
CoxModel fit_coxph(const Eigen::MatrixXd& x, OutcomeSpan outcomes, std::vector<std::string> feature_names,
                   const CoxOptions& options = {});

struct PenaltyParams {
  std::string preset = "custom";
  double alpha = 0.0;
  double l1_ratio = 0.5;
  // When set, alpha = alpha_min_ratio * (smallest alpha that zeroes every coefficient).
  std::optional<double> alpha_min_ratio;
  bool standardize = true;
  int max_sweeps = 10000;
  double tolerance = 1e-10;
};

enum class PenaltyPreset { kRidge, kLasso, kElastic };
PenaltyParams penalty_preset(PenaltyPreset preset);

/// Smallest alpha at which every coefficient is zero (standardised scale).
double penalized_alpha_max(const Eigen::MatrixXd& x, OutcomeSpan outcomes, double l1_ratio, bool standardize);

/// Cyclic coordinate descent on -loglik/n + alpha*(l1*|b|_1 + (1-l1)/2*|b|_2^2)
/// using a per-coordinate quadratic model and soft-thresholding.
CoxModel fit_penalized_cox(const Eigen::MatrixXd& x, OutcomeSpan outcomes, std::vector<std::string> feature_names,
                           const PenaltyParams& params);

// S(t | x) = exp(-H0(t) exp(r(x))) with r clipped to +-30.
SurvivalCurve predict_survival(const CoxModel& model, std::span<const double> x, std::span<const double> times);

}  // namespace caresurv
