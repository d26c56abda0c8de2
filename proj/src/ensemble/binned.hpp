#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "caresurv/ensemble.hpp"

namespace caresurv::detail {

/// Column-wise ranks of a design matrix: each value is replaced by the index
/// of its distinct value, so split search can accumulate per distinct value.
class BinnedMatrix {
 public:
  explicit BinnedMatrix(const Eigen::MatrixXd& x);

  std::size_t rows() const { return n_; }
  std::size_t cols() const { return values_.size(); }
  std::uint32_t bin(std::size_t row, std::size_t col) const { return bins_[col * n_ + row]; }
  const std::vector<double>& values(std::size_t col) const { return values_[col]; }
  std::size_t num_bins(std::size_t col) const { return values_[col].size(); }
  double value(std::size_t row, std::size_t col) const { return values_[col][bin(row, col)]; }

 private:
  std::size_t n_ = 0;
  std::vector<std::vector<double>> values_;
  std::vector<std::uint32_t> bins_;
};

// Leaf reached by a training row.
std::size_t route(const RegressionTree& tree, const BinnedMatrix& x, std::size_t row);

// First `k` entries of a random permutation of 0..n-1.
std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, std::mt19937_64& rng);

// Drops orphaned nodes and renumbers in depth-first order.
RegressionTree compact(const RegressionTree& tree);

}  // namespace caresurv::detail
