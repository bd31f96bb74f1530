#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "taskvec/param.hpp"
#include "taskvec/task_vector.hpp"

namespace taskvec {

struct RegConfig {
  double alpha = 0.0;      // anchor strength on backbone entries (ITA)
  double beta = 0.0;       // barrier strength on backbone entries (IEL)
  double alpha_cls = 0.0;  // anchor strength on head entries
  double beta_cls = 0.0;   // barrier strength on head entries
  // Apply regulariser gradients straight to the parameters before the
  // optimiser step. Unset means: on for LoRA and IA3, off for FFT.
  std::optional<bool> decoupled;

  void validate() const;
  bool decoupled_for(Variant variant) const {
    return decoupled.value_or(variant != Variant::FFT);
  }
};

// Elementwise strength: `body` on backbone entries, `head` on head entries.
ParamVector strength_mask(const ParamLayout& layout, double body, double head);

// sum_i F_i tau_i^2 over a dense displacement. The Fisher may cover a prefix
// of the displacement's layout; missing entries count as zero.
double ewc_penalty(const ParamVector& displacement, const FisherDiagonal& fisher);
double ewc_penalty(const TaskVector& tau, const FisherDiagonal& fisher, const ParamVector& theta0);

// Gradient of 1/2 * sum_i m_i F_i tau_i^2 in dense form (m = 1 without a mask).
ParamVector ewc_grad_dense(const ParamVector& displacement, const FisherDiagonal& fisher,
                           const ParamVector* mask = nullptr);
// Same gradient pulled back to the adapter's own parameters:
// FFT -> F*tau, LoRA -> ((F*tau) A^T, B^T (F*tau)), IA3 -> rowsum((F*tau) * theta0).
std::vector<double> ewc_grad(const TaskVector& tau, const FisherDiagonal& fisher,
                             const ParamVector& theta0, const ParamVector* mask = nullptr);

// Fisher-form barrier, expanded:
//   1/2 sum_t w_t (1 - w_t) EWC(tau_t) - sum_t sum_{t'<t} w_t w_t' tau_t^T F tau_t'.
double omega_value(const std::vector<ParamVector>& taus, std::span<const double> weights,
                   const FisherDiagonal& fisher);
// Same quantity as a weighted sum of pairwise Fisher distances:
//   1/2 sum_t sum_{t'<t} w_t w_t' (tau_t - tau_t')^T F (tau_t - tau_t').
double omega_pairwise(const std::vector<ParamVector>& taus, std::span<const double> weights,
                      const FisherDiagonal& fisher);

// d Omega / d tau_k with uniform weights 1/k and the k-1 earlier vectors
// frozen, given their cached sum:
//   (1/k) F * ((1 - 1/k) tau_k - (1/k) sum_prev).
ParamVector omega_grad_dense(const ParamVector& tau_k, const ParamVector& sum_prev, std::size_t k,
                             const FisherDiagonal& fisher, const ParamVector* mask = nullptr);
std::vector<double> omega_grad_current(const TaskVector& tau_k, const ParamVector& sum_prev,
                                       std::size_t k, const FisherDiagonal& fisher,
                                       const ParamVector& theta0, const ParamVector* mask = nullptr);

}  // namespace taskvec
