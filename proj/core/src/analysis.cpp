#include "taskvec/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "taskvec/errors.hpp"
#include "taskvec/fisher.hpp"

namespace taskvec {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void check_taus(const QuadraticProxy& q, const std::vector<Vector>& taus, std::span<const double> weights) {
  if (taus.size() != weights.size()) throw ValidationError("one weight per task vector is required");
  for (const auto& t : taus)
    if (std::size_t(t.size()) != q.dim()) throw LayoutError("task vector size does not match the proxy");
}

// Row-wise log-softmax over columns [range.start, range.end).
Matrix log_softmax(const Matrix& logits, ClassRange range) {
  Matrix out = logits.middleCols(Eigen::Index(range.start), Eigen::Index(range.size()));
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double mx = out.row(i).maxCoeff();
    const double lse = mx + std::log((out.row(i).array() - mx).exp().sum());
    out.row(i).array() -= lse;
  }
  return out;
}

}  // namespace

QuadraticProxy QuadraticProxy::dense(double loss0, Vector grad0, Eigen::MatrixXd hess0) {
  if (hess0.rows() != grad0.size() || hess0.cols() != grad0.size())
    throw LayoutError("Hessian shape does not match the gradient");
  const double scale = std::max(1.0, hess0.cwiseAbs().maxCoeff());
  if ((hess0 - hess0.transpose()).cwiseAbs().maxCoeff() > 1e-9 * scale)
    throw ValidationError("proxy Hessian is not symmetric");
  QuadraticProxy q;
  q.loss0_ = loss0;
  q.grad0_ = std::move(grad0);
  q.hess_ = std::move(hess0);
  return q;
}

QuadraticProxy QuadraticProxy::diagonal(double loss0, Vector grad0, Vector hess_diag) {
  if (hess_diag.size() != grad0.size()) throw LayoutError("Hessian diagonal does not match the gradient");
  QuadraticProxy q;
  q.diagonal_ = true;
  q.loss0_ = loss0;
  q.grad0_ = std::move(grad0);
  q.diag_ = std::move(hess_diag);
  return q;
}

double QuadraticProxy::quad(const Vector& a, const Vector& b) const {
  if (diagonal_) return (a.array() * diag_.array() * b.array()).sum();
  return a.dot(hess_ * b);
}

double QuadraticProxy::eval(const Vector& tau) const {
  if (std::size_t(tau.size()) != dim()) throw LayoutError("displacement size does not match the proxy");
  return loss0_ + grad0_.dot(tau) + 0.5 * quad(tau, tau);
}

double QuadraticProxy::min_eigenvalue() const {
  if (diagonal_) return diag_.size() ? diag_.minCoeff() : 0.0;
  if (hess_.size() == 0) return 0.0;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(hess_, Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

double proxy_eval(const QuadraticProxy& q, const Vector& tau) { return q.eval(tau); }

Vector to_eigen(const ParamVector& v) {
  return Eigen::Map<const Vector>(v.values().data(), Eigen::Index(v.size()));
}

Vector combine(const std::vector<Vector>& taus, std::span<const double> weights) {
  if (taus.empty()) throw ValidationError("no task vectors to combine");
  if (taus.size() != weights.size()) throw ValidationError("one weight per task vector is required");
  Vector out = Vector::Zero(taus.front().size());
  for (std::size_t t = 0; t < taus.size(); ++t) out += weights[t] * taus[t];
  return out;
}

double omega_quadratic(const QuadraticProxy& q, const std::vector<Vector>& taus, std::span<const double> weights) {
  check_taus(q, taus, weights);
  double total = 0.0;
  for (std::size_t t = 0; t < taus.size(); ++t)
    for (std::size_t s = 0; s < t; ++s) {
      const Vector d = taus[t] - taus[s];
      total += weights[t] * weights[s] * q.quad(d, d);
    }
  return 0.5 * total;
}

namespace {

double individual_mean(const QuadraticProxy& q, const std::vector<Vector>& taus, std::span<const double> weights) {
  double acc = 0.0;
  for (std::size_t t = 0; t < taus.size(); ++t) acc += weights[t] * q.eval(taus[t]);
  return acc;
}

}  // namespace

double decomposition_residual(const QuadraticProxy& q, const std::vector<Vector>& taus, std::span<const double> weights) {
  check_taus(q, taus, weights);
  validate_weights(weights);
  const double composed = q.eval(combine(taus, weights));
  return std::abs(composed + omega_quadratic(q, taus, weights) - individual_mean(q, taus, weights));
}

JensenGap jensen_gap(const QuadraticProxy& q, const std::vector<Vector>& taus, std::span<const double> weights,
                     double psd_tol) {
  check_taus(q, taus, weights);
  validate_weights(weights);
  JensenGap out;
  out.min_eigenvalue = q.min_eigenvalue();
  out.applicable = out.min_eigenvalue >= -psd_tol;
  out.gap = individual_mean(q, taus, weights) - q.eval(combine(taus, weights));
  return out;
}

double interpolation_residual(const QuadraticProxy& q, const std::vector<Vector>& taus,
                              std::span<const double> weights, double beta) {
  check_taus(q, taus, weights);
  validate_weights(weights);
  const double composed = q.eval(combine(taus, weights));
  const double lhs = (1.0 - beta) * composed + beta * individual_mean(q, taus, weights);
  const double rhs = composed + beta * omega_quadratic(q, taus, weights);
  return lhs - rhs;
}

std::vector<KlRow> kl_quadratic_check(const Network& net, const ParamVector& theta0, const ParamVector& tau,
                                      const Batch& data, ClassRange range, const std::vector<double>& epsilons) {
  if (!(tau.layout() == theta0.layout())) throw LayoutError("tau layout does not match theta0");
  const Eigen::MatrixXd fim = full_fisher(net, theta0, data, range);
  const Vector t = to_eigen(tau);
  const double tft = t.dot(fim * t);
  const Matrix logp = log_softmax(net.forward(theta0, data.inputs), range);
  const Eigen::ArrayXXd p = logp.array().exp();

  std::vector<KlRow> rows;
  for (double eps : epsilons) {
    KlRow r;
    r.eps = eps;
    ParamVector moved = theta0;
    moved.add_scaled(tau, eps);
    const Matrix logq = log_softmax(net.forward(moved, data.inputs), range);
    r.kl = (p * (logp - logq).array()).sum() / double(data.size());
    r.quad = 0.5 * eps * eps * tft;
    r.ratio = r.quad > 0.0 ? r.kl / r.quad : kNaN;
    rows.push_back(r);
  }
  return rows;
}

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ValidationError("loglog_slope needs two or more points");
  double mx = 0.0, my = 0.0;
  const double n = double(x.size());
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < x.size(); ++i) {
    lx.push_back(std::log(std::abs(x[i])));
    ly.push_back(std::log(std::abs(y[i])));
    mx += lx.back() / n;
    my += ly.back() / n;
  }
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    sxy += (lx[i] - mx) * (ly[i] - my);
    sxx += (lx[i] - mx) * (lx[i] - mx);
  }
  return sxy / sxx;
}

AccMatrix::AccMatrix(std::size_t tasks, std::vector<std::size_t> task_sizes)
    : tasks_(tasks), a_(tasks * tasks, kNaN), sizes_(std::move(task_sizes)) {
  if (!sizes_.empty() && sizes_.size() != tasks) throw ValidationError("one size per task is required");
}

double AccMatrix::at(std::size_t k, std::size_t t) const {
  if (k >= tasks_ || t >= tasks_) throw ValidationError("accuracy index out of range");
  return a_[k * tasks_ + t];
}

void AccMatrix::set(std::size_t k, std::size_t t, double accuracy) {
  if (k >= tasks_ || t > k) throw ValidationError("accuracy entries are defined for t <= k only");
  if (!(accuracy >= 0.0 && accuracy <= 1.0)) throw ValidationError("accuracy must lie in [0, 1]");
  a_[k * tasks_ + t] = accuracy;
}

bool AccMatrix::defined(std::size_t k, std::size_t t) const { return !std::isnan(at(k, t)); }

double final_accuracy(const AccMatrix& m) {
  if (m.tasks() == 0) throw ValidationError("empty accuracy matrix");
  const std::size_t last = m.tasks() - 1;
  double num = 0.0, den = 0.0;
  for (std::size_t t = 0; t < m.tasks(); ++t) {
    if (!m.defined(last, t)) throw ValidationError("last row of the accuracy matrix is incomplete");
    const double w = m.task_sizes().empty() ? 1.0 : double(m.task_sizes()[t]);
    num += w * m.at(last, t);
    den += w;
  }
  return num / den;
}

double final_forgetting(const AccMatrix& m) {
  const std::size_t T = m.tasks();
  if (T <= 1) return 0.0;
  double total = 0.0;
  for (std::size_t t = 0; t + 1 < T; ++t) {
    double best = -1.0;
    for (std::size_t k = t; k + 1 < T; ++k) {
      if (!m.defined(k, t)) throw ValidationError("accuracy matrix has gaps below the diagonal");
      best = std::max(best, m.at(k, t));
    }
    total += best - m.at(T - 1, t);
  }
  return total / double(T - 1);
}

double cosine(const ParamVector& a, const ParamVector& b) {
  if (!(a.layout() == b.layout())) throw LayoutError("cosine of vectors with different layouts");
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) return kNaN;
  return a.dot(b) / (na * nb);
}

Alignment alignment(const Pool& a, const Pool& b) {
  if (!(a.theta0().layout() == b.theta0().layout())) throw LayoutError("pools have different layouts");
  if (a.count() != b.count()) throw ValidationError("pools hold different numbers of task vectors");
  if (a.empty()) throw ValidationError("pools are empty");
  Alignment out;
  double sum = 0.0;
  for (int id = 1; id <= int(a.count()); ++id) {
    out.per_task.push_back(cosine(a.displacement(id), b.displacement(id)));
    sum += out.per_task.back();
  }
  out.mean = sum / double(a.count());
  out.composed = cosine(a.compose() - a.theta0(), b.compose() - b.theta0());
  return out;
}

double global_nll(const Network& net, const ParamVector& theta, const Batch& data) {
  if (data.empty()) throw ValidationError("empirical risk of an empty dataset");
  const ClassRange all{0, theta.layout().num_classes()};
  return net.loss(theta, data, all);
}

void VerificationReport::record(double residual, std::uint64_t seed) {
  ++instances;
  samples.emplace_back(seed, residual);
  const double r = std::isfinite(residual) ? residual : std::numeric_limits<double>::infinity();
  if (instances == 1 || r > max_residual) {
    max_residual = r;
    worst_seed = seed;
  }
  if (!(r <= tolerance)) pass = false;
}

nlohmann::json VerificationReport::to_json() const {
  nlohmann::json j;
  j["check"] = check;
  j["instances"] = instances;
  j["max_residual"] = max_residual;
  j["tolerance"] = tolerance;
  j["pass"] = pass;
  j["worst_seed"] = worst_seed;
  if (!details.empty()) j["details"] = details;
  return j;
}

}  // namespace taskvec
