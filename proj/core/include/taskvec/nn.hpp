#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "taskvec/param.hpp"

namespace taskvec {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

enum class Activation { Tanh, Gelu };

std::string_view to_string(Activation activation);
Activation activation_from_string(std::string_view text);

struct NetSpec {
  std::size_t input_dim = 1;
  std::vector<std::size_t> hidden;
  Activation activation = Activation::Tanh;
  std::vector<std::size_t> head_dims;

  void validate() const;
  std::size_t feature_dim() const { return hidden.empty() ? input_dim : hidden.back(); }
};

// n x d inputs and global class ids.
struct Batch {
  Matrix inputs;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }
  Batch rows(const std::vector<std::size_t>& indices) const;
};

Batch concat(const std::vector<const Batch*>& parts);

// Half-open range [start, end) of global class ids.
struct ClassRange {
  std::size_t start = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - start; }
  bool contains(int label) const {
    return label >= 0 && static_cast<std::size_t>(label) >= start &&
           static_cast<std::size_t>(label) < end;
  }
  bool operator==(const ClassRange&) const = default;
};

// -log softmax(logits[start..end))[label]; out-of-range logits are ignored.
double local_cross_entropy(std::span<const double> logits, int label, ClassRange range);

struct LossGrad {
  double loss = 0.0;
  ParamVector grad;
};

// Feed-forward classifier: a smooth MLP backbone followed by one affine head
// per task. Head structure is read from the parameter layout, so the same
// network object serves every stage of an incremental run.
class Network {
 public:
  explicit Network(NetSpec spec);

  const NetSpec& spec() const { return spec_; }
  std::size_t feature_dim() const { return spec_.feature_dim(); }

  // Layout for the backbone plus spec().head_dims.
  ParamLayout layout() const;
  // Scaled-Gaussian backbone weights (1/sqrt(fan_in)), zero biases and heads.
  ParamVector init(std::uint64_t seed, double weight_scale = 1.0) const;

  // Logits over the concatenation of all heads (global class order).
  Matrix forward(const ParamVector& theta, const Matrix& inputs) const;
  // Last hidden activation (the inputs themselves when there is no hidden layer).
  Matrix features(const ParamVector& theta, const Matrix& inputs) const;
  // Logits of every head computed from precomputed features.
  Matrix head_logits(const ParamVector& theta, const Matrix& features) const;

  // Mean local cross-entropy over the batch.
  double loss(const ParamVector& theta, const Batch& batch, ClassRange range) const;
  LossGrad loss_and_grad(const ParamVector& theta, const Batch& batch, ClassRange range) const;

  // Per-sample vector-Jacobian product: given d(scalar)/d(logits[range]) for
  // one input row, returns d(scalar)/d(theta).
  ParamVector logit_vjp(const ParamVector& theta, std::span<const double> input,
                        ClassRange range, std::span<const double> dlogits) const;
  // Softmax over logits[range] for one input row.
  std::vector<double> local_probabilities(const ParamVector& theta, std::span<const double> input,
                                          ClassRange range) const;
  // Gradients of log p(c | x) for every class c in range, from one forward
  // pass; the local probabilities are written to `probs`.
  std::vector<ParamVector> log_prob_grads(const ParamVector& theta, std::span<const double> input,
                                          ClassRange range, std::vector<double>& probs) const;

  void check(const ParamVector& theta) const;

 private:
  struct Trace;
  Trace run(const ParamVector& theta, const Matrix& inputs, ClassRange range) const;
  ParamVector backward(const ParamVector& theta, const Trace& trace, const Matrix& dlogits) const;

  NetSpec spec_;
};

// New zero-initialised head with `num_classes` outputs appended to the layout;
// existing values are copied bit for bit.
ParamVector add_head(const ParamVector& theta0, std::size_t num_classes);
ParamVector add_head(const Network& net, const ParamVector& theta0, std::size_t num_classes);

// Global class range served by head `task_id`.
ClassRange head_range(const ParamLayout& layout, int task_id);

// Index of the largest logit of each row, over all classes.
std::vector<int> predict(const Matrix& logits);
double accuracy(const Matrix& logits, const std::vector<int>& labels);

using GradientFn = std::function<std::vector<double>(const std::vector<double>&)>;

// Central differences of an analytic gradient, one gradient pair per
// coordinate, step h_i = rel_step * max(1, |x_i|). Returns the raw
// (unsymmetrised) Jacobian.
Eigen::MatrixXd finite_difference_jacobian(const GradientFn& grad, const std::vector<double>& x,
                                           double rel_step = 1e-5);

inline constexpr std::size_t kMaxDenseParams = 2500;

// Symmetrised finite-difference Hessian of the mean local loss. Throws
// CapacityError above kMaxDenseParams parameters.
Eigen::MatrixXd exact_hessian(const Network& net, const ParamVector& theta, const Batch& batch,
                              ClassRange range);

struct ProbeOptions {
  std::size_t epochs = 3;
  double lr = 1e-2;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
};

// Plain minibatch SGD on the listed heads only, from precomputed features,
// with softmax over `range`. Backbone entries are never touched.
ParamVector fit_heads(const Network& net, const ParamVector& theta, const Matrix& features,
                      const std::vector<int>& labels, ClassRange range,
                      const std::vector<int>& head_ids, const ProbeOptions& options);

// Linear probing of head `head_id` on a dataset with the backbone frozen and
// local cross-entropy over that head's classes.
ParamVector linear_probe(const Network& net, const ParamVector& theta0, const Batch& data,
                         int head_id, const ProbeOptions& options);

}  // namespace taskvec
