#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "taskvec/nn.hpp"
#include "taskvec/param.hpp"
#include "taskvec/pool.hpp"

namespace taskvec {

// Second-order expansion of a loss around theta0:
//   l(tau) = l0 + g^T tau + 1/2 tau^T H tau,
// with H either dense (small models) or diagonal (Fisher surrogate).
class QuadraticProxy {
 public:
  // Throws ValidationError if `hess0` is not symmetric to 1e-9 relative.
  static QuadraticProxy dense(double loss0, Vector grad0, Eigen::MatrixXd hess0);
  static QuadraticProxy diagonal(double loss0, Vector grad0, Vector hess_diag);

  bool is_diagonal() const { return diagonal_; }
  std::size_t dim() const { return std::size_t(grad0_.size()); }
  double loss0() const { return loss0_; }
  const Vector& grad0() const { return grad0_; }
  const Eigen::MatrixXd& hess_dense() const { return hess_; }
  const Vector& hess_diag() const { return diag_; }

  double eval(const Vector& tau) const;
  // a^T H b
  double quad(const Vector& a, const Vector& b) const;
  double min_eigenvalue() const;

 private:
  QuadraticProxy() = default;

  bool diagonal_ = false;
  double loss0_ = 0.0;
  Vector grad0_;
  Eigen::MatrixXd hess_;
  Vector diag_;
};

double proxy_eval(const QuadraticProxy& q, const Vector& tau);

Vector to_eigen(const ParamVector& v);
// sum_t w_t tau_t
Vector combine(const std::vector<Vector>& taus, std::span<const double> weights);

// 1/2 sum_t sum_{t'<t} w_t w_t' (tau_t - tau_t')^T H (tau_t - tau_t')
double omega_quadratic(const QuadraticProxy& q, const std::vector<Vector>& taus, std::span<const double> weights);

// |l(theta_P) + Omega - sum_t w_t l(theta_t)| on the proxy.
double decomposition_residual(const QuadraticProxy& q, const std::vector<Vector>& taus, std::span<const double> weights);

struct JensenGap {
  bool applicable = true;  // false when H has an eigenvalue below -psd_tol
  double gap = 0.0;        // sum_t w_t l(theta_t) - l(theta_P)
  double min_eigenvalue = 0.0;
};

JensenGap jensen_gap(const QuadraticProxy& q, const std::vector<Vector>& taus, std::span<const double> weights,
                     double psd_tol = 1e-8);

// (1-beta) l(theta_P) + beta sum_t w_t l(theta_t) - (l(theta_P) + beta Omega), signed.
double interpolation_residual(const QuadraticProxy& q, const std::vector<Vector>& taus,
                              std::span<const double> weights, double beta);

struct KlRow {
  double eps = 0.0;
  double kl = 0.0;     // mean KL(p_theta0 || p_theta0+eps*tau) over the dataset
  double quad = 0.0;   // 1/2 (eps tau)^T F (eps tau) with the full Fisher
  double ratio = 0.0;  // kl / quad, NaN when quad == 0
};

std::vector<KlRow> kl_quadratic_check(const Network& net, const ParamVector& theta0, const ParamVector& tau,
                                      const Batch& data, ClassRange range, const std::vector<double>& epsilons);

// Least-squares slope of log|y| against log x.
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

// a(k, t): accuracy on task t after training task k, 0-based, defined for t <= k.
class AccMatrix {
 public:
  AccMatrix() = default;
  explicit AccMatrix(std::size_t tasks, std::vector<std::size_t> task_sizes = {});

  std::size_t tasks() const { return tasks_; }
  const std::vector<std::size_t>& task_sizes() const { return sizes_; }
  double at(std::size_t k, std::size_t t) const;
  void set(std::size_t k, std::size_t t, double accuracy);
  bool defined(std::size_t k, std::size_t t) const;

 private:
  std::size_t tasks_ = 0;
  std::vector<double> a_;
  std::vector<std::size_t> sizes_;
};

// Sample-weighted mean of the last row (plain mean without task sizes).
double final_accuracy(const AccMatrix& m);
// 1/(T-1) sum_{t<T} [max_{t<=k<T} a(k,t) - a(T,t)], 1-based; 0 for T = 1.
double final_forgetting(const AccMatrix& m);

// Cosine similarity, NaN when either side is zero.
double cosine(const ParamVector& a, const ParamVector& b);

struct Alignment {
  std::vector<double> per_task;
  double mean = 0.0;      // NaN if any per-task cosine is undefined
  double composed = 0.0;  // cosine of the composed displacements
};

Alignment alignment(const Pool& a, const Pool& b);

// Mean cross-entropy with a softmax over every head (class-incremental risk).
double global_nll(const Network& net, const ParamVector& theta, const Batch& data);

struct VerificationReport {
  std::string check;
  std::size_t instances = 0;
  double max_residual = 0.0;
  double tolerance = 0.0;
  bool pass = true;
  std::uint64_t worst_seed = 0;
  nlohmann::json details = nlohmann::json::object();
  std::vector<std::pair<std::uint64_t, double>> samples;  // (seed, residual) per instance

  // Track one instance; `residual` must be finite to pass.
  void record(double residual, std::uint64_t seed);
  nlohmann::json to_json() const;
};

}  // namespace taskvec
