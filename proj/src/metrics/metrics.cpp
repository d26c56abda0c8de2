#include "caresurv/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace caresurv {

namespace {

class CountTree {
 public:
  explicit CountTree(std::size_t n) : t_(n + 1, 0.0) {}
  void add(std::size_t i, double v) {
    for (++i; i < t_.size(); i += i & (~i + 1)) t_[i] += v;
  }
  double prefix(std::size_t i) const {  // sum over [0, i)
    double s = 0;
    for (; i > 0; i -= i & (~i + 1)) s += t_[i];
    return s;
  }

 private:
  std::vector<double> t_;
};

std::vector<std::size_t> score_ranks(std::span<const double> scores, std::size_t& distinct) {
  std::vector<double> v(scores.begin(), scores.end());
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  distinct = v.size();
  std::vector<std::size_t> r(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    r[i] = static_cast<std::size_t>(std::lower_bound(v.begin(), v.end(), scores[i]) - v.begin());
  }
  return r;
}

// Weighted concordance over pairs (i event, t_j > t_i); weight(i) <= 0 skips i.
template <class Weight>
std::optional<double> weighted_concordance(std::span<const double> scores, OutcomeSpan outcomes, Weight weight) {
  if (scores.size() != outcomes.size()) throw ValidationError("concordance: scores and outcomes differ in length");
  for (double s : scores) {
    if (!std::isfinite(s)) throw ValidationError("concordance: non-finite score");
  }
  std::size_t distinct = 0;
  const auto rank = score_ranks(scores, distinct);
  TimeGroups tg(outcomes);
  CountTree tree(distinct);
  double inserted = 0;
  double num = 0, den = 0;
  for (std::size_t k = tg.groups.size(); k-- > 0;) {
    const auto& g = tg.groups[k];
    for (std::size_t m = g.begin; m < g.end; ++m) {
      const std::size_t i = tg.order[m];
      if (!outcomes[i].event) continue;
      const double w = weight(i);
      if (w <= 0) continue;
      const double lower = tree.prefix(rank[i]);
      const double tied = tree.prefix(rank[i] + 1) - lower;
      num += w * (lower + 0.5 * tied);
      den += w * inserted;
    }
    for (std::size_t m = g.begin; m < g.end; ++m) {
      tree.add(rank[tg.order[m]], 1.0);
      inserted += 1;
    }
  }
  if (den <= 0) return std::nullopt;
  return num / den;
}

}  // namespace

std::optional<double> harrell_cindex(std::span<const double> scores, OutcomeSpan outcomes) {
  return weighted_concordance(scores, outcomes, [](std::size_t) { return 1.0; });
}

std::optional<double> ipcw_cindex(OutcomeSpan train_outcomes, std::span<const double> test_scores,
                                  OutcomeSpan test_outcomes, double tau) {
  const StepFunction g = censoring_kaplan_meier(train_outcomes);
  return weighted_concordance(test_scores, test_outcomes, [&](std::size_t i) {
    const double t = test_outcomes[i].time_days;
    if (!(t < tau)) return 0.0;
    const double gi = g.left_limit(t);
    if (gi <= 0) {
      throw ValidationError("ipcw_cindex: censoring survival is 0 at t=" + std::to_string(t) + " below tau=" +
                            std::to_string(tau) + "; choose a smaller tau");
    }
    return 1.0 / (gi * gi);
  });
}

std::optional<double> dynamic_auc(double t, std::span<const double> risk_scores, OutcomeSpan test_outcomes,
                                  const StepFunction& censor_km) {
  if (risk_scores.size() != test_outcomes.size()) throw ValidationError("dynamic_auc: length mismatch");
  std::vector<double> controls;
  for (std::size_t i = 0; i < risk_scores.size(); ++i) {
    if (test_outcomes[i].time_days > t) controls.push_back(risk_scores[i]);
  }
  std::sort(controls.begin(), controls.end());
  double num = 0, den = 0;
  for (std::size_t i = 0; i < risk_scores.size(); ++i) {
    const auto& o = test_outcomes[i];
    if (!o.event || o.time_days > t) continue;
    const double gi = censor_km.left_limit(o.time_days);
    if (gi <= 0) throw ValidationError("dynamic_auc: censoring survival is 0 at t=" + std::to_string(o.time_days));
    const double w = 1.0 / gi;
    const auto lo = std::lower_bound(controls.begin(), controls.end(), risk_scores[i]);
    const auto hi = std::upper_bound(lo, controls.end(), risk_scores[i]);
    num += w * (static_cast<double>(lo - controls.begin()) + 0.5 * static_cast<double>(hi - lo));
    den += w * static_cast<double>(controls.size());
  }
  if (den <= 0) return std::nullopt;
  return num / den;
}

double brier_score(double t, std::span<const double> predicted_survival, OutcomeSpan test_outcomes,
                   const StepFunction& censor_km) {
  if (predicted_survival.size() != test_outcomes.size()) throw ValidationError("brier_score: length mismatch");
  if (test_outcomes.empty()) throw ValidationError("brier_score: empty sample");
  const double gt = censor_km(t);
  double sum = 0;
  for (std::size_t i = 0; i < predicted_survival.size(); ++i) {
    const double s = predicted_survival[i];
    if (!(s >= 0.0 && s <= 1.0)) throw ValidationError("brier_score: prediction outside [0, 1]");
    const auto& o = test_outcomes[i];
    if (o.time_days <= t && o.event) {
      const double gi = censor_km.left_limit(o.time_days);
      if (gi <= 0) throw ValidationError("brier_score: censoring survival is 0 at t=" + std::to_string(o.time_days));
      sum += s * s / gi;
    } else if (o.time_days > t) {
      if (gt <= 0) throw ValidationError("brier_score: censoring survival is 0 at t=" + std::to_string(t));
      sum += (1.0 - s) * (1.0 - s) / gt;
    }
  }
  return sum / static_cast<double>(predicted_survival.size());
}

double integrated_brier(std::span<const double> t_grid, const std::vector<std::vector<double>>& curves,
                        OutcomeSpan test_outcomes, const StepFunction& censor_km) {
  if (t_grid.size() < 2) throw ValidationError("integrated_brier: grid needs at least 2 points");
  if (curves.size() != test_outcomes.size()) throw ValidationError("integrated_brier: curves and outcomes differ");
  for (std::size_t k = 1; k < t_grid.size(); ++k) {
    if (!(t_grid[k] > t_grid[k - 1])) throw ValidationError("integrated_brier: grid must be strictly ascending");
  }
  std::vector<double> b(t_grid.size());
  std::vector<double> col(curves.size());
  for (std::size_t k = 0; k < t_grid.size(); ++k) {
    for (std::size_t i = 0; i < curves.size(); ++i) {
      if (curves[i].size() != t_grid.size()) throw ValidationError("integrated_brier: curve length differs from grid");
      col[i] = curves[i][k];
    }
    b[k] = brier_score(t_grid[k], col, test_outcomes, censor_km);
  }
  double area = 0;
  for (std::size_t k = 1; k < t_grid.size(); ++k) area += 0.5 * (b[k] + b[k - 1]) * (t_grid[k] - t_grid[k - 1]);
  return area / (t_grid.back() - t_grid.front());
}

RocPoint confusion_at(std::span<const double> survival_probs, std::span<const int> labels, double threshold) {
  if (survival_probs.size() != labels.size()) throw ValidationError("roc: probabilities and labels differ in length");
  RocPoint p;
  p.threshold = threshold;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool pred = survival_probs[i] >= threshold;
    if (labels[i] == 1) {
      pred ? ++p.tp : ++p.fn;
    } else if (labels[i] == 0) {
      pred ? ++p.fp : ++p.tn;
    } else {
      throw ValidationError("roc: labels must be 0 or 1");
    }
  }
  const auto ratio = [](std::size_t a, std::size_t b) -> std::optional<double> {
    if (a + b == 0) return std::nullopt;
    return static_cast<double>(a) / static_cast<double>(a + b);
  };
  p.tpr = ratio(p.tp, p.fn).value_or(0.0);
  p.fpr = ratio(p.fp, p.tn).value_or(0.0);
  p.tnr = 1.0 - p.fpr;
  p.npv = ratio(p.tn, p.fn);
  p.ppv = ratio(p.tp, p.fp);
  return p;
}

RocCurve roc_with_clinical_metrics(std::span<const double> survival_probs, std::span<const int> labels) {
  if (survival_probs.size() != labels.size()) throw ValidationError("roc: probabilities and labels differ in length");
  RocCurve c;
  const auto pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) {
    c.reason = "labels contain a single class";
    return c;
  }
  c.defined = true;
  std::vector<double> th(survival_probs.begin(), survival_probs.end());
  th.push_back(0.0);
  th.push_back(1.0);
  std::sort(th.begin(), th.end(), std::greater<>());
  th.erase(std::unique(th.begin(), th.end()), th.end());

  std::vector<std::size_t> idx(labels.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return survival_probs[a] > survival_probs[b]; });
  std::size_t k = 0, tp = 0, fp = 0;
  for (double t : th) {
    while (k < idx.size() && survival_probs[idx[k]] >= t) {
      labels[idx[k]] == 1 ? ++tp : ++fp;
      ++k;
    }
    RocPoint p;
    p.threshold = t;
    p.tp = tp;
    p.fp = fp;
    p.fn = pos - tp;
    p.tn = neg - fp;
    p.tpr = static_cast<double>(tp) / static_cast<double>(pos);
    p.fpr = static_cast<double>(fp) / static_cast<double>(neg);
    p.tnr = 1.0 - p.fpr;
    if (p.tn + p.fn > 0) p.npv = static_cast<double>(p.tn) / static_cast<double>(p.tn + p.fn);
    if (p.tp + p.fp > 0) p.ppv = static_cast<double>(p.tp) / static_cast<double>(p.tp + p.fp);
    c.points.push_back(p);
  }
  // Mann-Whitney form of the area.
  std::vector<double> neg_scores;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 0) neg_scores.push_back(survival_probs[i]);
  }
  std::sort(neg_scores.begin(), neg_scores.end());
  double num = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 1) continue;
    const auto lo = std::lower_bound(neg_scores.begin(), neg_scores.end(), survival_probs[i]);
    const auto hi = std::upper_bound(lo, neg_scores.end(), survival_probs[i]);
    num += static_cast<double>(lo - neg_scores.begin()) + 0.5 * static_cast<double>(hi - lo);
  }
  c.auc = num / (static_cast<double>(pos) * static_cast<double>(neg));
  return c;
}

MetricValue aggregate_ci(std::string name, std::span<const double> values) {
  if (values.empty()) throw ValidationError("aggregate_ci: no values for " + name);
  MetricValue m;
  m.name = std::move(name);
  m.n_repeats = values.size();
  const double n = static_cast<double>(values.size());
  m.point = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double half = 0.0;
  if (values.size() > 1) {
    double ss = 0;
    for (double v : values) ss += (v - m.point) * (v - m.point);
    half = 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  }
  m.low = m.point - half;
  m.high = m.point + half;
  return m;
}

std::string format_metric(const MetricValue& m, int decimals) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%.*f (%.*f-%.*f)", decimals, m.point, decimals, m.low, decimals, m.high);
  return buf;
}

nlohmann::json to_json(const MetricValue& m) {
  return {{"name", m.name}, {"point", m.point}, {"low", m.low}, {"high", m.high}, {"n_repeats", m.n_repeats}};
}

nlohmann::json to_json(const RocPoint& p) {
  nlohmann::json j{{"threshold", p.threshold}, {"tpr", p.tpr}, {"fpr", p.fpr}, {"tnr", p.tnr},
                   {"tp", p.tp},               {"fp", p.fp},   {"tn", p.tn},   {"fn", p.fn}};
  j["npv"] = p.npv ? nlohmann::json(*p.npv) : nlohmann::json(nullptr);
  j["ppv"] = p.ppv ? nlohmann::json(*p.ppv) : nlohmann::json(nullptr);
  return j;
}

nlohmann::json to_json(const RocCurve& c) {
  nlohmann::json j{{"defined", c.defined}};
  if (!c.defined) j["reason"] = c.reason;
  j["auc"] = c.auc ? nlohmann::json(*c.auc) : nlohmann::json(nullptr);
  auto& pts = j["points"] = nlohmann::json::array();
  for (const auto& p : c.points) pts.push_back(to_json(p));
  return j;
}

}  // namespace caresurv
