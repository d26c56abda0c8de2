#include <algorithm>
#include <cmath>
#include <numeric>

#include "binned.hpp"
#include "caresurv/util.hpp"

namespace caresurv {

ForestParams forest_preset() { return ForestParams{}; }

double logrank_statistic(OutcomeSpan outcomes, std::span<const bool> in_group) {
  if (in_group.size() != outcomes.size()) throw ValidationError("logrank: group flags misaligned with outcomes");
  TimeGroups tg(outcomes);
  double y = static_cast<double>(outcomes.size());
  double y1 = static_cast<double>(std::count(in_group.begin(), in_group.end(), true));
  double u = 0.0, v = 0.0;
  for (const auto& g : tg.groups) {
    double d = 0, d1 = 0, c1 = 0;
    for (std::size_t k = g.begin; k < g.end; ++k) {
      const std::size_t r = tg.order[k];
      if (outcomes[r].event) {
        d += 1;
        if (in_group[r]) d1 += 1;
      }
      if (in_group[r]) c1 += 1;
    }
    if (d > 0) {
      u += d1 - y1 * d / y;
      if (y > 1) v += (y1 / y) * (1.0 - y1 / y) * (y - d) / (y - 1.0) * d;
    }
    y -= static_cast<double>(g.end - g.begin);
    y1 -= c1;
  }
  return v > 0 ? std::abs(u) / std::sqrt(v) : 0.0;
}

namespace {

using detail::BinnedMatrix;

class Fenwick {
 public:
  void reset(std::size_t n) { t_.assign(n + 1, 0.0); }
  void add(std::size_t i, double v) {
    for (++i; i < t_.size(); i += i & (~i + 1)) t_[i] += v;
  }
  // Sum over [0, i).
  double prefix(std::size_t i) const {
    double s = 0;
    for (; i > 0; i -= i & (~i + 1)) s += t_[i];
    return s;
  }

 private:
  std::vector<double> t_;
};

class SurvivalTreeBuilder {
 public:
  SurvivalTreeBuilder(const BinnedMatrix& x, OutcomeSpan outcomes, std::span<const std::uint32_t> time_rank,
                      std::span<const double> distinct_times, std::span<const double> event_times,
                      const ForestParams& params, std::mt19937_64& rng)
      : x_(x),
        outcomes_(outcomes),
        rank_(time_rank),
        times_(distinct_times),
        event_times_(event_times),
        params_(params),
        rng_(rng),
        local_(distinct_times.size(), 0) {}

  SurvivalTree build(std::vector<std::size_t> rows) {
    rows_ = std::move(rows);
    result_ = SurvivalTree{};
    result_.tree.nodes.emplace_back();
    result_.leaf_hazards.emplace_back();
    grow(0, 0, rows_.size(), 0);
    return std::move(result_);
  }

 private:
  // Risk-set summaries of a node on its own distinct times.
  struct NodeTimes {
    std::vector<std::uint32_t> ranks;  // global ranks present, ascending
    std::vector<double> at_risk, deaths;
    std::vector<double> a, b1, c;  // prefix sums of d/Y, w/Y, w/Y^2
  };

  void summarise(std::size_t begin, std::size_t end, NodeTimes& nt) {
    nt.ranks.clear();
    for (std::size_t k = begin; k < end; ++k) nt.ranks.push_back(rank_[rows_[k]]);
    std::sort(nt.ranks.begin(), nt.ranks.end());
    nt.ranks.erase(std::unique(nt.ranks.begin(), nt.ranks.end()), nt.ranks.end());
    const std::size_t t = nt.ranks.size();
    for (std::size_t l = 0; l < t; ++l) local_[nt.ranks[l]] = static_cast<std::uint32_t>(l);
    std::vector<double> count(t, 0.0);
    nt.deaths.assign(t, 0.0);
    for (std::size_t k = begin; k < end; ++k) {
      const std::size_t r = rows_[k];
      const auto l = local_[rank_[r]];
      count[l] += 1;
      if (outcomes_[r].event) nt.deaths[l] += 1;
    }
    nt.at_risk.assign(t, 0.0);
    double acc = 0;
    for (std::size_t l = t; l-- > 0;) {
      acc += count[l];
      nt.at_risk[l] = acc;
    }
    nt.a.assign(t, 0.0);
    nt.b1.assign(t, 0.0);
    nt.c.assign(t, 0.0);
    double sa = 0, sb = 0, sc = 0;
    for (std::size_t l = 0; l < t; ++l) {
      const double y = nt.at_risk[l], d = nt.deaths[l];
      const double w = (d > 0 && y > 1) ? d * (y - d) / (y - 1.0) : 0.0;
      sa += d / y;
      sb += w / y;
      sc += w / (y * y);
      nt.a[l] = sa;
      nt.b1[l] = sb;
      nt.c[l] = sc;
    }
  }

  struct Split {
    bool found = false;
    std::size_t feature = 0;
    std::uint32_t left_max_bin = 0;
    double threshold = 0;
    double statistic = 0;
  };

  // Log-rank scan over the distinct values of feature f; false if constant.
  bool scan_feature(std::size_t f, std::size_t begin, std::size_t end, const NodeTimes& nt, Split& best) {
    const std::size_t nb = x_.num_bins(f);
    bucket_start_.assign(nb + 1, 0);
    for (std::size_t k = begin; k < end; ++k) ++bucket_start_[x_.bin(rows_[k], f) + 1];
    std::size_t nonempty = 0;
    for (std::size_t b = 0; b < nb; ++b) {
      if (bucket_start_[b + 1] > 0) ++nonempty;
      bucket_start_[b + 1] += bucket_start_[b];
    }
    if (nonempty < 2) return false;
    sorted_.resize(end - begin);
    fill_ = bucket_start_;
    for (std::size_t k = begin; k < end; ++k) sorted_[fill_[x_.bin(rows_[k], f)]++] = rows_[k];

    const std::size_t t = nt.ranks.size();
    count_tree_.reset(t);
    c_tree_.reset(t);
    const double m = static_cast<double>(end - begin);
    double n_left = 0, d_left = 0, sa = 0, sb = 0, q = 0;
    std::size_t prev = nb;
    for (std::size_t b = 0; b < nb; ++b) {
      if (bucket_start_[b + 1] == bucket_start_[b]) continue;
      if (prev < nb && n_left >= params_.min_samples_leaf && m - n_left >= params_.min_samples_leaf) {
        const double u = d_left - sa;
        const double v = sb - q;
        if (v > 1e-12) {
          const double stat = std::abs(u) / std::sqrt(v);
          if (!best.found || stat > best.statistic) {
            best.found = true;
            best.feature = f;
            best.left_max_bin = static_cast<std::uint32_t>(prev);
            best.threshold = 0.5 * (x_.values(f)[prev] + x_.values(f)[b]);
            best.statistic = stat;
          }
        }
      }
      for (std::size_t k = bucket_start_[b]; k < bucket_start_[b + 1]; ++k) {
        const std::size_t r = sorted_[k];
        const std::size_t l = local_[rank_[r]];
        n_left += 1;
        if (outcomes_[r].event) d_left += 1;
        sa += nt.a[l];
        sb += nt.b1[l];
        const double ge = n_left - 1 - count_tree_.prefix(l);
        q += 2.0 * (nt.c[l] * ge + c_tree_.prefix(l)) + nt.c[l];
        count_tree_.add(l, 1.0);
        c_tree_.add(l, nt.c[l]);
      }
      prev = b;
    }
    return true;
  }

  void make_leaf(std::size_t node, const NodeTimes& nt) {
    StepFunction h;
    double acc = 0;
    for (std::size_t l = 0; l < nt.ranks.size(); ++l) {
      if (nt.deaths[l] == 0) continue;
      acc += nt.deaths[l] / nt.at_risk[l];
      h.knots.push_back(times_[nt.ranks[l]]);
      h.values.push_back(acc);
    }
    // Sum of the step function over the training event times.
    double mortality = 0;
    for (std::size_t k = 0; k < h.knots.size(); ++k) {
      const auto lo = std::lower_bound(event_times_.begin(), event_times_.end(), h.knots[k]);
      const auto hi = k + 1 < h.knots.size()
                          ? std::lower_bound(event_times_.begin(), event_times_.end(), h.knots[k + 1])
                          : event_times_.end();
      mortality += h.values[k] * static_cast<double>(hi - lo);
    }
    result_.tree.nodes[node].value = mortality;
    result_.leaf_hazards[node] = std::move(h);
  }

  void grow(std::size_t node, std::size_t begin, std::size_t end, int depth) {
    NodeTimes nt;
    summarise(begin, end, nt);
    const double m = static_cast<double>(end - begin);
    result_.tree.nodes[node].cover = m;
    const double deaths = std::accumulate(nt.deaths.begin(), nt.deaths.end(), 0.0);
    if (depth >= params_.max_depth || m < params_.min_samples_split || m < 2.0 * params_.min_samples_leaf ||
        nt.ranks.size() < 2 || deaths == 0) {
      make_leaf(node, nt);
      return;
    }
    const std::size_t p = x_.cols();
    std::size_t max_features = params_.max_features > 0
                                   ? static_cast<std::size_t>(params_.max_features)
                                   : std::max<std::size_t>(1, static_cast<std::size_t>(std::sqrt(double(p))));
    max_features = std::min(max_features, p);
    std::vector<std::size_t> order(p);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Split best;
    std::size_t visited = 0;
    for (std::size_t i = 0; i < p && visited < max_features; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, p - 1);
      std::swap(order[i], order[pick(rng_)]);
      if (scan_feature(order[i], begin, end, nt, best)) ++visited;
    }
    if (!best.found || !(best.statistic > 0)) {
      make_leaf(node, nt);
      return;
    }
    // Keep an internal-node value so explanations have a defined expectation.
    make_leaf(node, nt);
    result_.leaf_hazards[node] = StepFunction{};

    auto mid = std::partition(rows_.begin() + static_cast<std::ptrdiff_t>(begin),
                              rows_.begin() + static_cast<std::ptrdiff_t>(end),
                              [&](std::size_t r) { return x_.bin(r, best.feature) <= best.left_max_bin; });
    const auto split = static_cast<std::size_t>(mid - rows_.begin());
    const auto left = result_.tree.nodes.size();
    result_.tree.nodes.resize(left + 2);
    result_.leaf_hazards.resize(left + 2);
    auto& n = result_.tree.nodes[node];
    n.feature = static_cast<std::int32_t>(best.feature);
    n.threshold = best.threshold;
    n.left = static_cast<std::int32_t>(left);
    n.right = static_cast<std::int32_t>(left + 1);
    grow(left, begin, split, depth + 1);
    grow(left + 1, split, end, depth + 1);
  }

  const BinnedMatrix& x_;
  OutcomeSpan outcomes_;
  std::span<const std::uint32_t> rank_;
  std::span<const double> times_;
  std::span<const double> event_times_;
  const ForestParams& params_;
  std::mt19937_64& rng_;
  std::vector<std::uint32_t> local_;
  std::vector<std::size_t> rows_;
  std::vector<std::size_t> bucket_start_, fill_, sorted_;
  Fenwick count_tree_, c_tree_;
  SurvivalTree result_;
};

}  // namespace

SurvivalForestModel fit_rsf(const Eigen::MatrixXd& x, OutcomeSpan outcomes, std::vector<std::string> feature_names,
                            const ForestParams& params) {
  const auto n = static_cast<std::size_t>(x.rows());
  if (n != outcomes.size()) throw ValidationError("design rows and outcomes differ in length");
  if (static_cast<std::size_t>(x.cols()) != feature_names.size()) {
    throw ValidationError("design columns and feature names differ in length");
  }
  if (params.n_estimators < 1) throw ValidationError("n_estimators must be >= 1");
  if (params.max_depth < 0 || params.min_samples_leaf < 1 || params.min_samples_split < 2) {
    throw ValidationError("invalid forest tree-size parameters");
  }
  if (n == 0) throw ValidationError("cannot fit a forest on an empty cohort");

  SurvivalForestModel model;
  model.feature_names = std::move(feature_names);
  model.params = params;

  std::vector<double> distinct;
  for (const auto& o : outcomes) distinct.push_back(o.time_days);
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  std::vector<std::uint32_t> rank(n);
  for (std::size_t i = 0; i < n; ++i) {
    rank[i] = static_cast<std::uint32_t>(
        std::lower_bound(distinct.begin(), distinct.end(), double(outcomes[i].time_days)) - distinct.begin());
  }
  for (const auto& o : outcomes) {
    if (o.event) model.unique_times.push_back(o.time_days);
  }
  std::sort(model.unique_times.begin(), model.unique_times.end());
  model.unique_times.erase(std::unique(model.unique_times.begin(), model.unique_times.end()), model.unique_times.end());

  const BinnedMatrix bx(x);
  for (int t = 0; t < params.n_estimators; ++t) {
    const std::uint64_t tree_seed = derive_seed(params.seed, static_cast<std::uint64_t>(t));
    std::mt19937_64 rng(tree_seed);
    std::vector<std::size_t> rows(n);
    if (params.bootstrap) {
      std::uniform_int_distribution<std::size_t> pick(0, n - 1);
      for (auto& r : rows) r = pick(rng);
      std::sort(rows.begin(), rows.end());
    } else {
      std::iota(rows.begin(), rows.end(), std::size_t{0});
    }
    SurvivalTreeBuilder builder(bx, outcomes, rank, distinct, model.unique_times, params, rng);
    SurvivalTree tree = builder.build(std::move(rows));
    tree.seed = tree_seed;
    model.trees.push_back(std::move(tree));
  }
  return model;
}

double SurvivalForestModel::cumulative_hazard(std::span<const double> x, double t) const {
  if (x.size() != feature_names.size()) {
    throw ValidationError("forest expects " + std::to_string(feature_names.size()) + " features, got " +
                          std::to_string(x.size()));
  }
  double h = 0;
  for (const auto& tree : trees) h += tree.leaf_hazards[tree.tree.leaf_index(x)](t);
  return trees.empty() ? 0.0 : h / static_cast<double>(trees.size());
}

double SurvivalForestModel::risk_score(std::span<const double> x) const {
  if (x.size() != feature_names.size()) {
    throw ValidationError("forest expects " + std::to_string(feature_names.size()) + " features, got " +
                          std::to_string(x.size()));
  }
  double s = 0;
  for (const auto& tree : trees) s += tree.tree.predict(x);
  return trees.empty() ? 0.0 : s / static_cast<double>(trees.size());
}

}  // namespace caresurv
