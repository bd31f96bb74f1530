#include "taskvec/regularizers.hpp"

#include <cmath>

#include "taskvec/errors.hpp"

namespace taskvec {

void RegConfig::validate() const {
  for (double s : {alpha, beta, alpha_cls, beta_cls})
    if (!std::isfinite(s) || s < 0.0)
      throw ValidationError("regularisation strengths must be finite and >= 0");
}

ParamVector strength_mask(const ParamLayout& layout, double body, double head) {
  ParamVector mask(layout);
  for (std::size_t i = 0; i < layout.num_entries(); ++i) {
    const double s = layout.entry(i).is_head() ? head : body;
    for (auto& v : mask.entry(i)) v = s;
  }
  return mask;
}

namespace {

// Fisher values aligned with `layout`, zero-padded when the Fisher is older.
std::span<const double> fisher_for(const ParamLayout& layout, const FisherDiagonal& fisher,
                                   std::vector<double>& scratch) {
  if (fisher.layout() == layout) return fisher.values().values();
  if (!fisher.layout().is_prefix_of(layout))
    throw LayoutError("Fisher layout does not match the displacement");
  scratch.assign(layout.total_len(), 0.0);
  auto src = fisher.values().values();
  std::copy(src.begin(), src.end(), scratch.begin());
  return scratch;
}

void check_mask(const ParamVector* mask, const ParamLayout& layout) {
  if (mask && !(mask->layout() == layout)) throw LayoutError("strength mask layout mismatch");
}

double fisher_dot(std::span<const double> f, const ParamVector& a, const ParamVector& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) acc += f[i] * a[i] * b[i];
  return acc;
}

}  // namespace

double ewc_penalty(const ParamVector& displacement, const FisherDiagonal& fisher) {
  std::vector<double> scratch;
  auto f = fisher_for(displacement.layout(), fisher, scratch);
  return fisher_dot(f, displacement, displacement);
}

double ewc_penalty(const TaskVector& tau, const FisherDiagonal& fisher, const ParamVector& theta0) {
  return ewc_penalty(tau.materialize(theta0), fisher);
}

ParamVector ewc_grad_dense(const ParamVector& displacement, const FisherDiagonal& fisher,
                           const ParamVector* mask) {
  check_mask(mask, displacement.layout());
  std::vector<double> scratch;
  auto f = fisher_for(displacement.layout(), fisher, scratch);
  ParamVector g(displacement.layout());
  for (std::size_t i = 0; i < f.size(); ++i) g[i] = (mask ? (*mask)[i] : 1.0) * f[i] * displacement[i];
  return g;
}

std::vector<double> ewc_grad(const TaskVector& tau, const FisherDiagonal& fisher, const ParamVector& theta0,
                             const ParamVector* mask) {
  return tau.pullback(ewc_grad_dense(tau.materialize(theta0), fisher, mask), theta0);
}

double omega_value(const std::vector<ParamVector>& taus, std::span<const double> weights,
                   const FisherDiagonal& fisher) {
  if (taus.size() != weights.size()) throw ValidationError("one weight per task vector is required");
  if (taus.empty()) return 0.0;
  std::vector<double> scratch;
  auto f = fisher_for(taus.front().layout(), fisher, scratch);
  double anchor = 0.0;
  double cross = 0.0;
  for (std::size_t t = 0; t < taus.size(); ++t) {
    anchor += weights[t] * (1.0 - weights[t]) * fisher_dot(f, taus[t], taus[t]);
    for (std::size_t s = 0; s < t; ++s) cross += weights[t] * weights[s] * fisher_dot(f, taus[t], taus[s]);
  }
  return 0.5 * anchor - cross;
}

double omega_pairwise(const std::vector<ParamVector>& taus, std::span<const double> weights,
                      const FisherDiagonal& fisher) {
  if (taus.size() != weights.size()) throw ValidationError("one weight per task vector is required");
  if (taus.empty()) return 0.0;
  std::vector<double> scratch;
  auto f = fisher_for(taus.front().layout(), fisher, scratch);
  double total = 0.0;
  for (std::size_t t = 0; t < taus.size(); ++t)
    for (std::size_t s = 0; s < t; ++s) {
      double d2 = 0.0;
      for (std::size_t i = 0; i < f.size(); ++i) {
        const double d = taus[t][i] - taus[s][i];
        d2 += f[i] * d * d;
      }
      total += weights[t] * weights[s] * d2;
    }
  return 0.5 * total;
}

ParamVector omega_grad_dense(const ParamVector& tau_k, const ParamVector& sum_prev, std::size_t k,
                             const FisherDiagonal& fisher, const ParamVector* mask) {
  if (k < 1) throw ValidationError("task index k is 1-based");
  if (!(sum_prev.layout() == tau_k.layout())) throw LayoutError("sum_prev layout mismatch");
  check_mask(mask, tau_k.layout());
  std::vector<double> scratch;
  auto f = fisher_for(tau_k.layout(), fisher, scratch);
  const double inv_k = 1.0 / double(k);
  ParamVector g(tau_k.layout());
  for (std::size_t i = 0; i < f.size(); ++i) {
    const double m = mask ? (*mask)[i] : 1.0;
    g[i] = m * inv_k * f[i] * ((1.0 - inv_k) * tau_k[i] - inv_k * sum_prev[i]);
  }
  return g;
}

std::vector<double> omega_grad_current(const TaskVector& tau_k, const ParamVector& sum_prev, std::size_t k,
                                       const FisherDiagonal& fisher, const ParamVector& theta0,
                                       const ParamVector* mask) {
  return tau_k.pullback(omega_grad_dense(tau_k.materialize(theta0), sum_prev, k, fisher, mask), theta0);
}

}  // namespace taskvec
