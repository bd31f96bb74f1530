#include "taskvec/fisher.hpp"

#include "taskvec/errors.hpp"

namespace taskvec {

FisherDiagonal local_fisher(const Network& net, const ParamVector& theta0, const Batch& data,
                            ClassRange range) {
  if (data.empty()) throw ValidationError("cannot estimate a Fisher diagonal on an empty dataset");
  net.check(theta0);
  if (range.end > theta0.layout().num_classes() || range.size() == 0)
    throw ValidationError("Fisher class range is not covered by theta0's heads");

  std::vector<double> acc(theta0.size(), 0.0);
  std::vector<double> probs;
  const auto cols = data.inputs.cols();
  for (Eigen::Index i = 0; i < data.inputs.rows(); ++i) {
    const double* row = data.inputs.data() + i * cols;
    auto grads = net.log_prob_grads(theta0, {row, std::size_t(cols)}, range, probs);
    for (std::size_t c = 0; c < grads.size(); ++c) {
      const auto g = grads[c].values();
      for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += probs[c] * g[k] * g[k];
    }
  }
  const double n = double(data.size());
  for (auto& v : acc) v /= n;
  return FisherDiagonal(ParamVector(theta0.layout(), std::move(acc)), data.size());
}

FisherDiagonal accumulate(const FisherDiagonal& global, const FisherDiagonal& local, std::size_t n_t,
                          AccumulateMode mode) {
  if (!global.layout().is_prefix_of(local.layout()))
    throw LayoutError("global Fisher layout must be a prefix of the local one");
  if (global.sample_count() == 0) return FisherDiagonal(local.values(), n_t);

  const double big_n = double(global.sample_count());
  const double small_n = double(n_t);
  std::vector<double> out(local.values().raw());
  const auto g = global.values().values();
  for (std::size_t k = 0; k < g.size(); ++k) {
    out[k] = mode == AccumulateMode::WeightedMean ? (big_n * g[k] + small_n * out[k]) / (big_n + small_n)
                                                  : g[k] + out[k];
  }
  return FisherDiagonal(ParamVector(local.layout(), std::move(out)), global.sample_count() + n_t);
}

Eigen::MatrixXd full_fisher(const Network& net, const ParamVector& theta0, const Batch& data,
                            ClassRange range) {
  if (theta0.size() > kMaxDenseParams)
    throw CapacityError("full Fisher requested for " + std::to_string(theta0.size()) + " parameters");
  if (data.empty()) throw ValidationError("cannot estimate a Fisher matrix on an empty dataset");
  const auto p = Eigen::Index(theta0.size());
  Eigen::MatrixXd fim = Eigen::MatrixXd::Zero(p, p);
  std::vector<double> probs;
  const auto cols = data.inputs.cols();
  for (Eigen::Index i = 0; i < data.inputs.rows(); ++i) {
    const double* row = data.inputs.data() + i * cols;
    auto grads = net.log_prob_grads(theta0, {row, std::size_t(cols)}, range, probs);
    for (std::size_t c = 0; c < grads.size(); ++c) {
      Eigen::Map<const Eigen::VectorXd> g(grads[c].values().data(), p);
      fim.selfadjointView<Eigen::Lower>().rankUpdate(g, probs[c]);
    }
  }
  fim.triangularView<Eigen::StrictlyUpper>() = fim.transpose();
  return fim / double(data.size());
}

}  // namespace taskvec
