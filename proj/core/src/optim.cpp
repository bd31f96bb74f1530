#include "taskvec/optim.hpp"

#include <cmath>

#include "taskvec/errors.hpp"

namespace taskvec {

AdamW::AdamW(std::size_t num_params, AdamWOptions options)
    : options_(options), m_(num_params, 0.0), v_(num_params, 0.0) {
  if (!(options_.lr > 0.0) || !std::isfinite(options_.lr)) throw ValidationError("AdamW lr must be > 0");
  if (options_.beta1 < 0.0 || options_.beta1 >= 1.0 || options_.beta2 < 0.0 || options_.beta2 >= 1.0)
    throw ValidationError("AdamW moment coefficients must lie in [0, 1)");
  if (options_.weight_decay < 0.0) throw ValidationError("AdamW weight decay must be >= 0");
}

void AdamW::step(std::span<double> params, std::span<const double> grad) {
  if (params.size() != m_.size() || grad.size() != m_.size())
    throw ValidationError("AdamW: parameter/gradient size mismatch");
  ++steps_;
  const auto& o = options_;
  const double bc1 = 1.0 - std::pow(o.beta1, double(steps_));
  const double bc2 = 1.0 - std::pow(o.beta2, double(steps_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = o.beta1 * m_[i] + (1.0 - o.beta1) * grad[i];
    v_[i] = o.beta2 * v_[i] + (1.0 - o.beta2) * grad[i] * grad[i];
    const double mhat = m_[i] / bc1;
    const double vhat = v_[i] / bc2;
    if (o.weight_decay != 0.0) params[i] -= o.lr * o.weight_decay * params[i];
    params[i] -= o.lr * mhat / (std::sqrt(vhat) + o.eps);
  }
}

}  // namespace taskvec
