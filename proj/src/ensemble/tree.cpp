#include <algorithm>
#include <functional>
#include <numeric>

#include "binned.hpp"

namespace caresurv {

std::size_t RegressionTree::leaf_index(std::span<const double> x) const {
  std::size_t k = 0;
  while (nodes[k].feature >= 0) {
    const auto f = static_cast<std::size_t>(nodes[k].feature);
    if (f >= x.size()) throw ValidationError("tree refers to feature " + std::to_string(f) + " beyond input width");
    k = static_cast<std::size_t>(x[f] < nodes[k].threshold ? nodes[k].left : nodes[k].right);
  }
  return k;
}

int RegressionTree::depth() const {
  if (nodes.empty()) return 0;
  std::function<int(std::size_t)> rec = [&](std::size_t k) -> int {
    if (nodes[k].feature < 0) return 0;
    return 1 + std::max(rec(static_cast<std::size_t>(nodes[k].left)), rec(static_cast<std::size_t>(nodes[k].right)));
  };
  return rec(0);
}

std::size_t RegressionTree::num_leaves() const {
  return static_cast<std::size_t>(std::count_if(nodes.begin(), nodes.end(), [](const TreeNode& n) { return n.feature < 0; }));
}

namespace detail {

BinnedMatrix::BinnedMatrix(const Eigen::MatrixXd& x) : n_(static_cast<std::size_t>(x.rows())) {
  const auto p = static_cast<std::size_t>(x.cols());
  values_.resize(p);
  bins_.resize(n_ * p);
  for (std::size_t j = 0; j < p; ++j) {
    auto& v = values_[j];
    v.assign(x.col(static_cast<Eigen::Index>(j)).data(), x.col(static_cast<Eigen::Index>(j)).data() + n_);
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    for (std::size_t i = 0; i < n_; ++i) {
      const double xi = x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      bins_[j * n_ + i] = static_cast<std::uint32_t>(std::lower_bound(v.begin(), v.end(), xi) - v.begin());
    }
  }
}

std::size_t route(const RegressionTree& tree, const BinnedMatrix& x, std::size_t row) {
  std::size_t k = 0;
  while (tree.nodes[k].feature >= 0) {
    const auto& node = tree.nodes[k];
    const double v = x.value(row, static_cast<std::size_t>(node.feature));
    k = static_cast<std::size_t>(v < node.threshold ? node.left : node.right);
  }
  return k;
}

std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  k = std::min(k, n);
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(k);
  return idx;
}

RegressionTree compact(const RegressionTree& tree) {
  RegressionTree out;
  std::function<std::int32_t(std::size_t)> copy = [&](std::size_t k) -> std::int32_t {
    const auto id = static_cast<std::int32_t>(out.nodes.size());
    out.nodes.push_back(tree.nodes[k]);
    if (tree.nodes[k].feature >= 0) {
      const auto l = copy(static_cast<std::size_t>(tree.nodes[k].left));
      const auto r = copy(static_cast<std::size_t>(tree.nodes[k].right));
      out.nodes[static_cast<std::size_t>(id)].left = l;
      out.nodes[static_cast<std::size_t>(id)].right = r;
    } else {
      out.nodes[static_cast<std::size_t>(id)].left = -1;
      out.nodes[static_cast<std::size_t>(id)].right = -1;
    }
    return id;
  };
  if (!tree.nodes.empty()) copy(0);
  return out;
}

}  // namespace detail
}  // namespace caresurv
