#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <random>
#include <vector>

#include "taskvec/nn.hpp"

namespace taskvec {

// Mixture of axis-aligned Gaussians.
struct GaussianMixture {
  std::vector<double> weights;  // K, sums to one
  Matrix means;                 // K x D
  Matrix variances;             // K x D, floored

  std::size_t components() const { return weights.size(); }
  std::size_t dim() const { return std::size_t(means.cols()); }

  // Mean per-row log density.
  double mean_log_likelihood(const Matrix& x) const;
  Matrix sample(std::size_t n, std::mt19937_64& rng) const;
};

struct MogFitOptions {
  std::size_t components = 5;
  std::size_t iterations = 25;
  double variance_floor = 1e-6;
  std::uint64_t seed = 0;
};

struct MogFit {
  GaussianMixture model;
  // Mean log-likelihood under the parameters entering each EM iteration,
  // followed by the value for the final parameters.
  std::vector<double> log_likelihood;
};

// EM with k-means++ seeding. K is clamped to the number of rows.
MogFit fit_mog(const Matrix& features, const MogFitOptions& options);

// One mixture per global class id.
using MogStore = std::map<int, GaussianMixture>;

}  // namespace taskvec
