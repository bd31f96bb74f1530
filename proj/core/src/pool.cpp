#include "taskvec/pool.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "taskvec/errors.hpp"

namespace taskvec {

void validate_weights(std::span<const double> weights) {
  double total = 0.0;
  for (double w : weights) {
    if (!std::isfinite(w)) throw ValidationError("composition weights must be finite");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-12)
    throw ValidationError("composition weights sum to " + std::to_string(total) + ", not 1");
}

Pool::Pool(ParamVector theta0) : theta0_(std::move(theta0)), cum_sum_(theta0_.layout()) {}

void Pool::set_theta0(ParamVector theta0) {
  if (!theta0_.layout().is_prefix_of(theta0.layout()))
    throw LayoutError("new theta0 layout must extend the current one");
  if (!vectors_.empty()) {
    for (std::size_t i = 0; i < theta0_.layout().num_entries(); ++i) {
      if (theta0_.layout().entry(i).is_head()) continue;
      auto before = theta0_.entry(i);
      auto after = theta0.entry(i);
      if (!std::equal(before.begin(), before.end(), after.begin()))
        throw ValidationError("backbone of theta0 cannot change once task vectors are pooled");
    }
  }
  cum_sum_ = cum_sum_.size() ? cum_sum_.extended_to(theta0.layout()) : ParamVector(theta0.layout());
  theta0_ = std::move(theta0);
}

void Pool::add(TaskVector tv) {
  tv.freeze(theta0_);
  cum_sum_ += tv.materialize(theta0_);
  vectors_.push_back(std::move(tv));
  custom_weights_.reset();
}

void Pool::check_id(int task_id) const {
  if (task_id < 1 || static_cast<std::size_t>(task_id) > vectors_.size())
    throw ValidationError("task id " + std::to_string(task_id) + " is not in the pool (1.." +
                          std::to_string(vectors_.size()) + ")");
}

const TaskVector& Pool::vector(int task_id) const {
  check_id(task_id);
  return vectors_[static_cast<std::size_t>(task_id - 1)];
}

std::vector<double> Pool::weights() const {
  if (custom_weights_) return *custom_weights_;
  return std::vector<double>(vectors_.size(), vectors_.empty() ? 0.0 : 1.0 / double(vectors_.size()));
}

void Pool::set_weights(std::vector<double> weights) {
  if (weights.size() != vectors_.size())
    throw ValidationError("expected " + std::to_string(vectors_.size()) + " weights");
  validate_weights(weights);
  custom_weights_ = std::move(weights);
}

ParamVector Pool::displacement(int task_id) const { return vector(task_id).materialize(theta0_); }

ParamVector Pool::explicit_sum(std::size_t n) const {
  if (n > vectors_.size()) throw ValidationError("explicit_sum past the end of the pool");
  ParamVector sum(theta0_.layout());
  for (std::size_t i = 0; i < n; ++i) sum += vectors_[i].materialize(theta0_);
  return sum;
}

ParamVector Pool::compose() const {
  if (vectors_.empty()) return theta0_;
  if (custom_weights_) return compose(*custom_weights_);
  ParamVector out = cum_sum_;
  out /= double(vectors_.size());
  return theta0_ + out;
}

ParamVector Pool::compose(std::span<const double> weights) const {
  if (vectors_.empty()) return theta0_;
  if (weights.size() != vectors_.size())
    throw ValidationError("expected " + std::to_string(vectors_.size()) + " weights");
  validate_weights(weights);
  ParamVector out = theta0_;
  for (std::size_t i = 0; i < vectors_.size(); ++i)
    out.add_scaled(vectors_[i].materialize(theta0_), weights[i]);
  return out;
}

ParamVector Pool::cumulative_base(std::size_t t) const {
  if (t != vectors_.size() + 1)
    throw ValidationError("cumulative_base expects t = count + 1 = " +
                          std::to_string(vectors_.size() + 1));
  ParamVector out = cum_sum_;
  out /= double(t);
  return theta0_ + out;
}

ParamVector Pool::specialize(const std::vector<int>& task_ids) const {
  if (task_ids.empty()) throw ValidationError("specialisation needs at least one task id");
  std::set<int> ids(task_ids.begin(), task_ids.end());
  for (int id : ids) check_id(id);
  ParamVector sum(theta0_.layout());
  for (int id : ids) sum += vectors_[static_cast<std::size_t>(id - 1)].materialize(theta0_);
  sum /= double(ids.size());
  return theta0_ + sum;
}

ParamVector Pool::unlearn(int task_id, UnlearnMode mode) const {
  check_id(task_id);
  if (vectors_.size() < 2) throw ValidationError("cannot unlearn from a single-vector pool");
  if (mode == UnlearnMode::Subtract) {
    ParamVector out = compose();
    out.add_scaled(displacement(task_id), -weights()[static_cast<std::size_t>(task_id - 1)]);
    return out;
  }
  std::vector<int> keep;
  for (int id = 1; id <= static_cast<int>(vectors_.size()); ++id)
    if (id != task_id) keep.push_back(id);
  return specialize(keep);
}

}  // namespace taskvec
