#pragma once

#include <cstddef>

#include <Eigen/Dense>

#include "taskvec/nn.hpp"
#include "taskvec/param.hpp"

namespace taskvec {

enum class AccumulateMode {
  WeightedMean,  // (N F + n L) / (N + n)
  Sum,           // F + L
};

// Diagonal of the true Fisher at theta0 over the local classes of `range`:
// for every sample, E_{y ~ p(y|x)} [(d log p(y|x) / d theta)^2] with the
// expectation taken by enumerating y, then averaged over the dataset.
// The returned sample_count is data.size().
FisherDiagonal local_fisher(const Network& net, const ParamVector& theta0, const Batch& data,
                            ClassRange range);

// Fold a task's local estimate into the running global one. The global layout
// may be a prefix of the local one; entries it lacks take the local value.
FisherDiagonal accumulate(const FisherDiagonal& global, const FisherDiagonal& local, std::size_t n_t,
                          AccumulateMode mode = AccumulateMode::WeightedMean);

// Full P x P Fisher, E_x sum_y p(y|x) g_y g_y^T, for models under the dense
// size guard.
Eigen::MatrixXd full_fisher(const Network& net, const ParamVector& theta0, const Batch& data,
                            ClassRange range);

}  // namespace taskvec
