#include "caresurv/explain.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

namespace caresurv {

namespace {

struct PathElement {
  std::int64_t feature = -1;
  double zero_fraction = 0;
  double one_fraction = 0;
  double pweight = 0;
};

void extend_path(PathElement* path, std::size_t depth, double zero_fraction, double one_fraction,
                 std::int64_t feature) {
  path[depth].feature = feature;
  path[depth].zero_fraction = zero_fraction;
  path[depth].one_fraction = one_fraction;
  path[depth].pweight = depth == 0 ? 1.0 : 0.0;
  const double d1 = static_cast<double>(depth + 1);
  for (std::size_t i = depth; i-- > 0;) {
    path[i + 1].pweight += one_fraction * path[i].pweight * static_cast<double>(i + 1) / d1;
    path[i].pweight = zero_fraction * path[i].pweight * static_cast<double>(depth - i) / d1;
  }
}

void unwind_path(PathElement* path, std::size_t depth, std::size_t index) {
  const double one = path[index].one_fraction;
  const double zero = path[index].zero_fraction;
  const double d1 = static_cast<double>(depth + 1);
  double next = path[depth].pweight;
  for (std::size_t i = depth; i-- > 0;) {
    if (one != 0) {
      const double tmp = path[i].pweight;
      path[i].pweight = next * d1 / (static_cast<double>(i + 1) * one);
      next = tmp - path[i].pweight * zero * static_cast<double>(depth - i) / d1;
    } else {
      path[i].pweight = path[i].pweight * d1 / (zero * static_cast<double>(depth - i));
    }
  }
  for (std::size_t i = index; i < depth; ++i) {
    path[i].feature = path[i + 1].feature;
    path[i].zero_fraction = path[i + 1].zero_fraction;
    path[i].one_fraction = path[i + 1].one_fraction;
  }
}

double unwound_path_sum(const PathElement* path, std::size_t depth, std::size_t index) {
  const double one = path[index].one_fraction;
  const double zero = path[index].zero_fraction;
  const double d1 = static_cast<double>(depth + 1);
  double next = path[depth].pweight;
  double total = 0;
  for (std::size_t i = depth; i-- > 0;) {
    if (one != 0) {
      const double tmp = next * d1 / (static_cast<double>(i + 1) * one);
      total += tmp;
      next = path[i].pweight - tmp * zero * static_cast<double>(depth - i) / d1;
    } else {
      total += path[i].pweight / zero / (static_cast<double>(depth - i) / d1);
    }
  }
  return total;
}

void recurse(const RegressionTree& tree, std::span<const double> x, std::span<double> phi, std::size_t node,
             PathElement* parent_path, std::size_t depth, double zero_fraction, double one_fraction,
             std::int64_t feature) {
  PathElement* path = parent_path + depth + 1;
  std::copy(parent_path, parent_path + depth + 1, path);
  extend_path(path, depth, zero_fraction, one_fraction, feature);

  const TreeNode& n = tree.nodes[node];
  if (n.feature < 0) {
    for (std::size_t i = 1; i <= depth; ++i) {
      const double w = unwound_path_sum(path, depth, i);
      phi[static_cast<std::size_t>(path[i].feature)] += w * (path[i].one_fraction - path[i].zero_fraction) * n.value;
    }
    return;
  }
  const auto split = static_cast<std::size_t>(n.feature);
  const auto hot = static_cast<std::size_t>(x[split] < n.threshold ? n.left : n.right);
  const auto cold = static_cast<std::size_t>(hot == static_cast<std::size_t>(n.left) ? n.right : n.left);
  const double hot_zero = tree.nodes[hot].cover / n.cover;
  const double cold_zero = tree.nodes[cold].cover / n.cover;
  double incoming_zero = 1, incoming_one = 1;
  std::size_t index = 0;
  for (; index <= depth; ++index) {
    if (path[index].feature == n.feature) break;
  }
  if (index != depth + 1) {
    incoming_zero = path[index].zero_fraction;
    incoming_one = path[index].one_fraction;
    unwind_path(path, depth, index);
    depth -= 1;
  }
  recurse(tree, x, phi, hot, path, depth + 1, hot_zero * incoming_zero, incoming_one, n.feature);
  recurse(tree, x, phi, cold, path, depth + 1, cold_zero * incoming_zero, 0, n.feature);
}

void check_cover(const RegressionTree& tree) {
  if (tree.nodes.empty()) throw ValidationError("tree has no nodes");
  for (const auto& n : tree.nodes) {
    if (!(n.cover > 0)) throw ValidationError("tree node without cover; explanations need trees fitted by the ensemble module");
  }
}

}  // namespace

double expected_value(const RegressionTree& tree) {
  check_cover(tree);
  double s = 0;
  for (const auto& n : tree.nodes) {
    if (n.feature < 0) s += n.cover * n.value;
  }
  return s / tree.nodes[0].cover;
}

void tree_shap(const RegressionTree& tree, std::span<const double> x, std::span<double> phi) {
  check_cover(tree);
  const int d = tree.depth();
  std::vector<PathElement> buffer(static_cast<std::size_t>((d + 2) * (d + 3) / 2 + d + 2));
  recurse(tree, x, phi, 0, buffer.data(), 0, 1.0, 1.0, -1);
}

ShapExplanation tree_shap(const BoostedCoxModel& model, std::span<const double> x) {
  const std::size_t p = model.feature_names.size();
  if (x.size() != p) {
    throw ValidationError("explanation expects " + std::to_string(p) + " features, got " + std::to_string(x.size()));
  }
  ShapExplanation e;
  e.feature_names = model.feature_names;
  e.feature_values.assign(x.begin(), x.end());
  e.contributions.assign(p, 0.0);
  for (const auto& t : model.trees) {
    e.base_value += expected_value(t);
    tree_shap(t, x, e.contributions);
  }
  e.margin = predict_margin(model, x);
  return e;
}

ShapExplanation linear_shap(const CoxModel& model, std::span<const double> x) {
  ShapExplanation e;
  e.feature_names = model.feature_names;
  e.feature_values.assign(x.begin(), x.end());
  e.margin = model.risk_score(x);
  for (std::size_t j = 0; j < x.size(); ++j) {
    const auto k = static_cast<Eigen::Index>(j);
    e.contributions.push_back(model.coefficients[k] * (x[j] - model.standardization.mean[k]) /
                              model.standardization.scale[k]);
  }
  return e;
}

ShapSummary shap_summary(const BoostedCoxModel& model, const Eigen::MatrixXd& background) {
  if (background.rows() == 0) throw ValidationError("shap summary needs a non-empty background");
  const std::size_t p = model.feature_names.size();
  if (static_cast<std::size_t>(background.cols()) != p) throw ValidationError("background width differs from model");
  ShapSummary s;
  s.feature_names = model.feature_names;
  s.values = background;
  s.shap = Eigen::MatrixXd::Zero(background.rows(), background.cols());
  std::vector<double> row(p);
  for (const auto& t : model.trees) s.base_value += expected_value(t);
  for (Eigen::Index i = 0; i < background.rows(); ++i) {
    for (std::size_t j = 0; j < p; ++j) row[j] = background(i, static_cast<Eigen::Index>(j));
    std::vector<double> phi(p, 0.0);
    for (const auto& t : model.trees) tree_shap(t, row, phi);
    for (std::size_t j = 0; j < p; ++j) s.shap(i, static_cast<Eigen::Index>(j)) = phi[j];
  }
  s.mean_abs.resize(p);
  for (std::size_t j = 0; j < p; ++j) s.mean_abs[j] = s.shap.col(static_cast<Eigen::Index>(j)).cwiseAbs().mean();
  s.ranking.resize(p);
  std::iota(s.ranking.begin(), s.ranking.end(), std::size_t{0});
  std::stable_sort(s.ranking.begin(), s.ranking.end(), [&](std::size_t a, std::size_t b) {
    if (s.mean_abs[a] != s.mean_abs[b]) return s.mean_abs[a] > s.mean_abs[b];
    return s.feature_names[a] < s.feature_names[b];
  });
  return s;
}

nlohmann::json ShapSummary::to_json() const {
  nlohmann::json j;
  j["unit"] = "log-hazard margin";
  j["base_value"] = base_value;
  auto& ranked = j["ranking"] = nlohmann::json::array();
  for (std::size_t r = 0; r < ranking.size(); ++r) {
    const std::size_t f = ranking[r];
    ranked.push_back({{"rank", r + 1}, {"feature", feature_names[f]}, {"mean_abs_shap", mean_abs[f]}});
  }
  auto& pts = j["samples"] = nlohmann::json::array();
  for (std::size_t f : ranking) {
    std::vector<double> phi(static_cast<std::size_t>(shap.rows())), val(static_cast<std::size_t>(shap.rows()));
    for (Eigen::Index i = 0; i < shap.rows(); ++i) {
      phi[static_cast<std::size_t>(i)] = shap(i, static_cast<Eigen::Index>(f));
      val[static_cast<std::size_t>(i)] = values(i, static_cast<Eigen::Index>(f));
    }
    pts.push_back({{"feature", feature_names[f]}, {"shap", phi}, {"value", val}});
  }
  return j;
}

namespace {

double pearson(std::span<const double> a, std::span<const double> b) {
  const double n = static_cast<double>(a.size());
  if (a.size() < 2) return 0;
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double saa = 0, sbb = 0, sab = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
    sab += (a[i] - ma) * (b[i] - mb);
  }
  const double scale = std::max(1.0, std::max(std::abs(ma), 1.0));
  if (saa <= 1e-24 * n * scale * scale || sbb <= 0) return 0;
  return sab / std::sqrt(saa * sbb);
}

// Bin ids of the chosen feature: each distinct value, or up to 10 quantile bins.
std::vector<std::size_t> dependence_bins(std::span<const double> v) {
  std::vector<double> sorted(v.begin(), v.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> distinct = sorted;
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  std::vector<double> cuts;
  if (distinct.size() <= 10) {
    cuts = distinct;
  } else {
    for (int q = 0; q < 10; ++q) cuts.push_back(sorted[static_cast<std::size_t>(q) * sorted.size() / 10]);
    cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
  }
  std::vector<std::size_t> bins(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    bins[i] = static_cast<std::size_t>(std::upper_bound(cuts.begin(), cuts.end(), v[i]) - cuts.begin()) - 1;
  }
  return bins;
}

}  // namespace

DependenceData shap_dependence(const ShapSummary& summary, const std::string& feature) {
  const auto it = std::find(summary.feature_names.begin(), summary.feature_names.end(), feature);
  if (it == summary.feature_names.end()) throw ValidationError("unknown feature '" + feature + "'");
  const auto j = static_cast<Eigen::Index>(it - summary.feature_names.begin());
  const auto n = static_cast<std::size_t>(summary.values.rows());
  DependenceData d;
  d.feature = feature;
  d.values.resize(n);
  d.shap.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    d.values[i] = summary.values(static_cast<Eigen::Index>(i), j);
    d.shap[i] = summary.shap(static_cast<Eigen::Index>(i), j);
  }
  if (std::all_of(d.values.begin(), d.values.end(), [&](double v) { return v == d.values.front(); })) {
    throw ValidationError("feature '" + feature + "' is constant; no dependence to show");
  }
  const auto bins = dependence_bins(d.values);
  const std::size_t nbins = *std::max_element(bins.begin(), bins.end()) + 1;
  std::vector<std::vector<std::size_t>> members(nbins);
  for (std::size_t i = 0; i < n; ++i) members[bins[i]].push_back(i);

  for (Eigen::Index k = 0; k < summary.values.cols(); ++k) {
    if (k == j) continue;
    double weighted = 0, total = 0;
    for (const auto& m : members) {
      if (m.size() < 3) continue;
      std::vector<double> a, b;
      for (auto i : m) {
        a.push_back(d.shap[i]);
        b.push_back(summary.values(static_cast<Eigen::Index>(i), k));
      }
      weighted += static_cast<double>(m.size()) * std::abs(pearson(a, b));
      total += static_cast<double>(m.size());
    }
    d.partner_scores.emplace_back(summary.feature_names[static_cast<std::size_t>(k)], total > 0 ? weighted / total : 0.0);
  }
  std::stable_sort(d.partner_scores.begin(), d.partner_scores.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  if (!d.partner_scores.empty()) {
    d.partner = d.partner_scores.front().first;
    const auto pk = std::find(summary.feature_names.begin(), summary.feature_names.end(), *d.partner) -
                    summary.feature_names.begin();
    for (std::size_t i = 0; i < n; ++i) d.partner_values.push_back(summary.values(static_cast<Eigen::Index>(i), pk));
  }
  return d;
}

DependenceData shap_dependence(const BoostedCoxModel& model, const Eigen::MatrixXd& x, const std::string& feature) {
  return shap_dependence(shap_summary(model, x), feature);
}

nlohmann::json DependenceData::to_json() const {
  nlohmann::json j{{"feature", feature}, {"values", values}, {"shap", shap}, {"unit", "log-hazard margin"}};
  j["partner"] = partner ? nlohmann::json(*partner) : nlohmann::json(nullptr);
  j["partner_values"] = partner_values;
  auto& sc = j["partner_scores"] = nlohmann::json::array();
  for (const auto& [name, score] : partner_scores) sc.push_back({{"feature", name}, {"score", score}});
  return j;
}

WaterfallData waterfall_data(const ShapExplanation& e, std::size_t top_k) {
  if (top_k < 1) throw ValidationError("top_k must be >= 1");
  const std::size_t p = e.contributions.size();
  WaterfallData w;
  w.base_value = e.base_value;
  w.final_margin = e.base_value;
  for (double c : e.contributions) w.final_margin += c;

  std::vector<std::size_t> order(p);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double ca = std::abs(e.contributions[a]), cb = std::abs(e.contributions[b]);
    if (ca != cb) return ca > cb;
    return e.feature_names[a] < e.feature_names[b];
  });
  double running = e.base_value;
  double rest = 0;
  std::size_t rest_count = 0;
  bool rest_nonzero = false;
  for (std::size_t r = 0; r < p; ++r) {
    const std::size_t f = order[r];
    const double c = e.contributions[f];
    if (w.entries.size() < top_k && c != 0.0) {
      running += c;
      w.entries.push_back({e.feature_names[f], e.feature_values[f], c, running, 1});
    } else {
      rest += c;
      ++rest_count;
      rest_nonzero = rest_nonzero || c != 0.0;
    }
  }
  if (rest_nonzero || w.entries.empty()) {
    w.entries.push_back({"remaining", std::numeric_limits<double>::quiet_NaN(), rest, running + rest, rest_count});
  }
  w.entries.back().cumulative = w.final_margin;
  return w;
}

nlohmann::json WaterfallData::to_json() const {
  nlohmann::json j{{"base_value", base_value}, {"final_margin", final_margin}, {"unit", "log-hazard margin"}};
  auto& es = j["entries"] = nlohmann::json::array();
  for (const auto& e : entries) {
    nlohmann::json x{{"label", e.label}, {"contribution", e.contribution}, {"cumulative", e.cumulative},
                     {"collapsed", e.collapsed}};
    x["feature_value"] = std::isnan(e.feature_value) ? nlohmann::json(nullptr) : nlohmann::json(e.feature_value);
    es.push_back(x);
  }
  return j;
}

SurvivalOverlay survival_overlay(const FittedModel& model, std::span<const double> record, const Eigen::MatrixXd& cohort,
                                 std::span<const double> times) {
  for (std::size_t k = 1; k < times.size(); ++k) {
    if (times[k] < times[k - 1]) throw ValidationError("overlay times must be ascending");
  }
  SurvivalOverlay o;
  o.times.assign(times.begin(), times.end());
  o.individual = predict_survival_any(model, record, times).survival;
  o.cohort_average.assign(times.size(), 0.0);
  std::vector<double> row(static_cast<std::size_t>(cohort.cols()));
  for (Eigen::Index i = 0; i < cohort.rows(); ++i) {
    for (Eigen::Index j = 0; j < cohort.cols(); ++j) row[static_cast<std::size_t>(j)] = cohort(i, j);
    const auto c = predict_survival_any(model, row, times);
    for (std::size_t k = 0; k < times.size(); ++k) o.cohort_average[k] += c.survival[k];
  }
  if (cohort.rows() > 0) {
    for (auto& v : o.cohort_average) v /= static_cast<double>(cohort.rows());
  }
  return o;
}

nlohmann::json SurvivalOverlay::to_json() const {
  return {{"times", times}, {"individual", individual}, {"cohort_average", cohort_average}};
}

nlohmann::json to_json(const ShapExplanation& e) {
  nlohmann::json j{{"base_value", e.base_value}, {"margin", e.margin}, {"unit", "log-hazard margin"}};
  auto& c = j["contributions"] = nlohmann::json::array();
  for (std::size_t f = 0; f < e.contributions.size(); ++f) {
    c.push_back({{"feature", e.feature_names[f]}, {"value", e.feature_values[f]}, {"shap", e.contributions[f]}});
  }
  return j;
}

}  // namespace caresurv
