#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>

#include "binned.hpp"

namespace caresurv {

BoostParams boost_preset(BoostPreset preset) {
  BoostParams p;
  switch (preset) {
    case BoostPreset::kGradientBoosting:
      p.preset = "gb";
      p.tree_kind = TreeKind::kLeastSquares;
      p.n_rounds = 771;
      p.learning_rate = 0.28;
      p.max_depth = 7;
      p.min_samples_split = 20;  // 20.04 floored
      p.min_samples_leaf = 1;    // 1.85 floored
      p.subsample = 0.83;
      p.max_features = 4;
      p.dropout_rate = 0.05;
      break;
    case BoostPreset::kXGBoost:
      p.preset = "xgb";
      p.tree_kind = TreeKind::kSecondOrder;
      p.n_rounds = 1107;
      p.learning_rate = 0.018;
      p.max_depth = 3;
      p.min_child_weight = 1.0;
      p.subsample = 0.58;
      p.colsample_bytree = 0.83;
      p.gamma = 0.49;
      p.lambda = 1.0;
      break;
  }
  return p;
}

BoostPreset boost_preset_from_string(std::string_view name) {
  if (name == "gb") return BoostPreset::kGradientBoosting;
  if (name == "xgb") return BoostPreset::kXGBoost;
  throw ValidationError("unknown boosting preset '" + std::string(name) + "' (expected gb or xgb)");
}

double BoostedCoxModel::margin(std::span<const double> x) const { return predict_margin(*this, x); }

double predict_margin(const BoostedCoxModel& model, std::span<const double> x) {
  if (x.size() != model.feature_names.size()) {
    throw ValidationError("boosted model expects " + std::to_string(model.feature_names.size()) + " features, got " +
                          std::to_string(x.size()));
  }
  double f = 0.0;
  for (const auto& t : model.trees) f += t.predict(x);
  return f;
}

std::vector<double> predict_margin(const BoostedCoxModel& model, const Eigen::MatrixXd& x) {
  std::vector<double> out(static_cast<std::size_t>(x.rows()));
  std::vector<double> row(static_cast<std::size_t>(x.cols()));
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) row[static_cast<std::size_t>(j)] = x(i, j);
    out[static_cast<std::size_t>(i)] = predict_margin(model, row);
  }
  return out;
}

namespace {

using detail::BinnedMatrix;

class TreeBuilder {
 public:
  TreeBuilder(const BinnedMatrix& x, const BoostParams& params, std::span<const double> g, std::span<const double> h,
              std::mt19937_64& rng)
      : x_(x), params_(params), g_(g), h_(h), rng_(rng) {}

  RegressionTree build(std::vector<std::size_t> rows, std::vector<std::size_t> features) {
    rows_ = std::move(rows);
    features_ = std::move(features);
    tree_.nodes.clear();
    loss_change_.clear();
    tree_.nodes.emplace_back();
    loss_change_.push_back(0.0);
    grow(0, 0, rows_.size(), 0);
    if (params_.tree_kind == TreeKind::kSecondOrder) prune(0);
    return detail::compact(tree_);
  }

 private:
  struct Stats {
    double count = 0, g = 0, h = 0;
  };
  struct Split {
    bool found = false;
    std::size_t feature = 0;
    std::uint32_t left_max_bin = 0;
    double threshold = 0;
    double gain = 0;
  };

  bool second_order() const { return params_.tree_kind == TreeKind::kSecondOrder; }

  double leaf_value(const Stats& s) const {
    if (second_order()) return params_.learning_rate * s.g / (s.h + params_.lambda);
    return s.count > 0 ? params_.learning_rate * s.g / s.count : 0.0;
  }

  double score(const Stats& s) const {
    if (second_order()) return s.g * s.g / (s.h + params_.lambda);
    return s.count > 0 ? s.g * s.g / s.count : 0.0;
  }

  bool child_ok(const Stats& s) const {
    if (s.count < params_.min_samples_leaf || s.count < 1) return false;
    return !second_order() || s.h >= params_.min_child_weight;
  }

  // Best split on one feature; returns false if the feature is constant in the node.
  bool scan_feature(std::size_t f, std::size_t begin, std::size_t end, const Stats& total, Split& best) {
    const std::size_t nb = x_.num_bins(f);
    hist_.assign(nb, Stats{});
    for (std::size_t k = begin; k < end; ++k) {
      const std::size_t r = rows_[k];
      auto& b = hist_[x_.bin(r, f)];
      b.count += 1;
      b.g += g_[r];
      if (second_order()) b.h += h_[r];
    }
    const double parent = score(total);
    Stats left;
    std::size_t prev = nb;
    std::size_t nonempty = 0;
    for (std::size_t b = 0; b < nb; ++b) {
      if (hist_[b].count == 0) continue;
      ++nonempty;
      if (prev < nb) {
        Stats right{total.count - left.count, total.g - left.g, total.h - left.h};
        if (child_ok(left) && child_ok(right)) {
          const double gain = score(left) + score(right) - parent;
          if (!best.found || gain > best.gain) {
            best.found = true;
            best.feature = f;
            best.left_max_bin = static_cast<std::uint32_t>(prev);
            best.threshold = 0.5 * (x_.values(f)[prev] + x_.values(f)[b]);
            best.gain = gain;
          }
        }
      }
      left.count += hist_[b].count;
      left.g += hist_[b].g;
      left.h += hist_[b].h;
      prev = b;
    }
    return nonempty > 1;
  }

  void grow(std::size_t node, std::size_t begin, std::size_t end, int depth) {
    Stats total;
    for (std::size_t k = begin; k < end; ++k) {
      total.count += 1;
      total.g += g_[rows_[k]];
      if (second_order()) total.h += h_[rows_[k]];
    }
    tree_.nodes[node].cover = total.count;
    tree_.nodes[node].value = leaf_value(total);
    if (depth >= params_.max_depth || total.count < params_.min_samples_split ||
        total.count < 2.0 * std::max(1, params_.min_samples_leaf)) {
      return;
    }

    Split best;
    if (params_.max_features > 0 && static_cast<std::size_t>(params_.max_features) < features_.size()) {
      // Visit features in random order until max_features non-constant ones were scanned.
      std::vector<std::size_t> order = features_;
      std::size_t visited = 0;
      for (std::size_t i = 0; i < order.size() && visited < static_cast<std::size_t>(params_.max_features); ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, order.size() - 1);
        std::swap(order[i], order[pick(rng_)]);
        if (scan_feature(order[i], begin, end, total, best)) ++visited;
      }
    } else {
      for (std::size_t f : features_) scan_feature(f, begin, end, total, best);
    }
    const double min_gain = second_order() ? 1e-6 : 1e-12 * std::max(1.0, score(total));
    if (!best.found || !(best.gain > min_gain)) return;

    auto mid = std::partition(rows_.begin() + static_cast<std::ptrdiff_t>(begin),
                              rows_.begin() + static_cast<std::ptrdiff_t>(end),
                              [&](std::size_t r) { return x_.bin(r, best.feature) <= best.left_max_bin; });
    const auto split = static_cast<std::size_t>(mid - rows_.begin());
    const auto left = tree_.nodes.size();
    tree_.nodes.emplace_back();
    tree_.nodes.emplace_back();
    loss_change_.push_back(0.0);
    loss_change_.push_back(0.0);
    auto& n = tree_.nodes[node];
    n.feature = static_cast<std::int32_t>(best.feature);
    n.threshold = best.threshold;
    n.left = static_cast<std::int32_t>(left);
    n.right = static_cast<std::int32_t>(left + 1);
    loss_change_[node] = best.gain;
    grow(left, begin, split, depth + 1);
    grow(left + 1, split, end, depth + 1);
  }

  // Bottom-up removal of splits whose loss reduction is below gamma.
  void prune(std::size_t node) {
    auto& n = tree_.nodes[node];
    if (n.feature < 0) return;
    prune(static_cast<std::size_t>(n.left));
    prune(static_cast<std::size_t>(n.right));
    const auto& l = tree_.nodes[static_cast<std::size_t>(n.left)];
    const auto& r = tree_.nodes[static_cast<std::size_t>(n.right)];
    if (l.feature < 0 && r.feature < 0 && loss_change_[node] < params_.gamma) n.feature = -1;
  }

  const BinnedMatrix& x_;
  const BoostParams& params_;
  std::span<const double> g_;
  std::span<const double> h_;
  std::mt19937_64& rng_;
  std::vector<std::size_t> rows_;
  std::vector<std::size_t> features_;
  std::vector<Stats> hist_;
  RegressionTree tree_;
  std::vector<double> loss_change_;
};

void check_boost_params(const BoostParams& p) {
  if (p.n_rounds < 0) throw ValidationError("n_rounds must be >= 0");
  if (!(p.learning_rate > 0)) throw ValidationError("learning_rate must be positive");
  if (p.max_depth < 0 || p.max_depth > 15) throw ValidationError("max_depth must lie in [0, 15]");
  if (!(p.subsample > 0 && p.subsample <= 1)) throw ValidationError("subsample must lie in (0, 1]");
  if (!(p.colsample_bytree > 0 && p.colsample_bytree <= 1)) throw ValidationError("colsample_bytree must lie in (0, 1]");
  if (!(p.dropout_rate >= 0 && p.dropout_rate < 1)) throw ValidationError("dropout_rate must lie in [0, 1)");
  if (p.lambda < 0 || p.gamma < 0 || p.min_child_weight < 0) throw ValidationError("penalties must be non-negative");
}

}  // namespace

BoostedCoxModel fit_gbcox(const Eigen::MatrixXd& x, OutcomeSpan outcomes, std::vector<std::string> feature_names,
                          const BoostParams& params) {
  check_boost_params(params);
  const auto n = static_cast<std::size_t>(x.rows());
  const auto p = static_cast<std::size_t>(x.cols());
  if (n != outcomes.size()) throw ValidationError("design rows and outcomes differ in length");
  if (p != feature_names.size()) throw ValidationError("design columns and feature names differ in length");
  const TimeGroups tg(outcomes);
  if (tg.total_deaths < 2) {
    throw ValidationError("boosting needs at least 2 events, got " + std::to_string(tg.total_deaths));
  }
  if (!x.allFinite()) throw ValidationError("design matrix contains non-finite values");

  BoostedCoxModel model;
  model.feature_names = std::move(feature_names);
  model.params = params;
  const BinnedMatrix bx(x);
  std::mt19937_64 rng(params.seed);

  std::vector<double> f(n, 0.0);
  auto loss = [&](std::span<const double> m) { return -cox_log_likelihood(m, tg, outcomes) / static_cast<double>(n); };
  model.loss_trace.push_back(loss(f));

  const bool dart = params.dropout_rate > 0.0;
  std::vector<double> scale;
  std::vector<std::vector<std::uint16_t>> leaf_cache;
  std::vector<double> fd(n);
  std::vector<std::size_t> all_features(p);
  std::iota(all_features.begin(), all_features.end(), std::size_t{0});
  std::bernoulli_distribution drop_coin(params.dropout_rate);
  std::bernoulli_distribution row_coin(params.subsample);

  for (int round = 0; round < params.n_rounds; ++round) {
    std::vector<std::size_t> dropped;
    if (dart && round > 0) {
      for (std::size_t m = 0; m < model.trees.size(); ++m) {
        if (drop_coin(rng)) dropped.push_back(m);
      }
      if (dropped.empty()) {
        std::uniform_int_distribution<std::size_t> pick(0, model.trees.size() - 1);
        dropped.push_back(pick(rng));
      }
    }
    fd = f;
    for (std::size_t m : dropped) {
      const auto& nodes = model.trees[m].nodes;
      for (std::size_t i = 0; i < n; ++i) fd[i] -= scale[m] * nodes[leaf_cache[m][i]].value;
    }
    const MarginDerivatives d = cox_margin_derivatives(fd, tg, outcomes);
    for (std::size_t i = 0; i < n; ++i) {
      if (!std::isfinite(d.gradient[i]) || !std::isfinite(d.hessian[i])) {
        throw ConvergenceError("non-finite Cox gradient at boosting iteration " + std::to_string(round));
      }
    }

    std::vector<std::size_t> rows;
    if (params.subsample >= 1.0) {
      rows.resize(n);
      std::iota(rows.begin(), rows.end(), std::size_t{0});
    } else if (params.tree_kind == TreeKind::kLeastSquares) {
      const auto k = std::max<std::size_t>(1, static_cast<std::size_t>(params.subsample * static_cast<double>(n)));
      rows = detail::sample_without_replacement(n, k, rng);
      std::sort(rows.begin(), rows.end());
    } else {
      for (std::size_t i = 0; i < n; ++i) {
        if (row_coin(rng)) rows.push_back(i);
      }
    }
    std::vector<std::size_t> features = all_features;
    if (params.colsample_bytree < 1.0) {
      const auto k = std::max<std::size_t>(1, static_cast<std::size_t>(params.colsample_bytree * static_cast<double>(p)));
      features = detail::sample_without_replacement(p, k, rng);
      std::sort(features.begin(), features.end());
    }

    TreeBuilder builder(bx, params, d.gradient, d.hessian, rng);
    RegressionTree tree = builder.build(std::move(rows), std::move(features));

    std::vector<std::uint16_t> leaves(n);
    for (std::size_t i = 0; i < n; ++i) leaves[i] = static_cast<std::uint16_t>(detail::route(tree, bx, i));
    if (dart) {
      const double k = static_cast<double>(dropped.size());
      for (std::size_t m : dropped) {
        const auto& nodes = model.trees[m].nodes;
        for (std::size_t i = 0; i < n; ++i) f[i] -= scale[m] / (k + 1.0) * nodes[leaf_cache[m][i]].value;
        scale[m] *= k / (k + 1.0);
      }
      scale.push_back(1.0 / (k + 1.0));
      for (std::size_t i = 0; i < n; ++i) f[i] += scale.back() * tree.nodes[leaves[i]].value;
      leaf_cache.push_back(std::move(leaves));
    } else {
      for (std::size_t i = 0; i < n; ++i) f[i] += tree.nodes[leaves[i]].value;
    }
    model.trees.push_back(std::move(tree));
    model.loss_trace.push_back(loss(f));
  }

  if (dart) {
    for (std::size_t m = 0; m < model.trees.size(); ++m) {
      for (auto& node : model.trees[m].nodes) node.value *= scale[m];
    }
  }
  auto b = breslow_baseline(outcomes, f);
  model.baseline_hazard = std::move(b.cumulative_hazard);
  model.clipped_scores = b.clipped_scores;
  return model;
}

void write_loss_trace_csv(const BoostedCoxModel& model, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << "iteration,neg_log_partial_likelihood_per_sample\n" << std::setprecision(12);
  for (std::size_t i = 0; i < model.loss_trace.size(); ++i) out << i << ',' << model.loss_trace[i] << '\n';
}

}  // namespace caresurv
