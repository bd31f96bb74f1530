#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "taskvec/param.hpp"
#include "taskvec/task_vector.hpp"

namespace taskvec {

enum class UnlearnMode {
  Renormalize,  // recompose the remaining vectors with weights 1/(T-1)
  Subtract,     // theta_P - w_t tau_t, remaining weights untouched
};

// theta0 plus an ordered list of frozen task vectors. Keeps the running sum
// of materialised displacements so the uniform composition and the base
// for the next task cost O(1) in the number of vectors.
//
// Task ids are 1-based and follow insertion order.
class Pool {
 public:
  Pool() = default;
  explicit Pool(ParamVector theta0);

  const ParamVector& theta0() const { return theta0_; }
  // Replace theta0 with one whose layout extends the current one. Once the
  // pool holds vectors, backbone entries must stay bit-identical.
  void set_theta0(ParamVector theta0);

  // Freezes `tv` against theta0, appends it and resets weights to uniform.
  void add(TaskVector tv);

  std::size_t count() const { return vectors_.size(); }
  bool empty() const { return vectors_.empty(); }
  const std::vector<TaskVector>& vectors() const { return vectors_; }
  const TaskVector& vector(int task_id) const;

  std::vector<double> weights() const;
  bool has_custom_weights() const { return custom_weights_.has_value(); }
  void set_weights(std::vector<double> weights);
  void reset_weights() { custom_weights_.reset(); }

  const ParamVector& cum_sum() const { return cum_sum_; }
  ParamVector displacement(int task_id) const;
  // Sum of the first `n` displacements recomputed from the stored vectors, in
  // the same order the cached sum was accumulated.
  ParamVector explicit_sum(std::size_t n) const;

  ParamVector compose() const;
  ParamVector compose(std::span<const double> weights) const;

  // theta0 + (1/t) * sum of the first t-1 displacements; t = count()+1 is the
  // task about to be trained.
  ParamVector cumulative_base(std::size_t t) const;

  ParamVector specialize(const std::vector<int>& task_ids) const;
  ParamVector unlearn(int task_id, UnlearnMode mode = UnlearnMode::Renormalize) const;

 private:
  void check_id(int task_id) const;

  ParamVector theta0_;
  std::vector<TaskVector> vectors_;
  std::optional<std::vector<double>> custom_weights_;
  ParamVector cum_sum_;
};

// Throws ValidationError unless the weights sum to one within 1e-12.
void validate_weights(std::span<const double> weights);

}  // namespace taskvec
