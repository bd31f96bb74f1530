#include "taskvec/mog.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "taskvec/errors.hpp"

namespace taskvec {

namespace {

// log N(x | mean, diag(var)) for every row of x against component k.
double log_gauss(const double* x, const GaussianMixture& g, Eigen::Index k) {
  const auto d = g.means.cols();
  double acc = -0.5 * double(d) * std::log(2.0 * std::numbers::pi);
  for (Eigen::Index j = 0; j < d; ++j) {
    const double var = g.variances(k, j);
    const double diff = x[j] - g.means(k, j);
    acc -= 0.5 * (std::log(var) + diff * diff / var);
  }
  return acc;
}

double log_sum_exp(const std::vector<double>& v) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double a : v) mx = std::max(mx, a);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double a : v) s += std::exp(a - mx);
  return mx + std::log(s);
}

// Fills `log_resp` (n x K) with log w_k + log N(x_i | k) and returns the mean
// log-likelihood.
double e_step(const Matrix& x, const GaussianMixture& g, Matrix& log_resp) {
  const auto n = x.rows();
  const auto k_count = Eigen::Index(g.components());
  log_resp.resize(n, k_count);
  std::vector<double> row(std::size_t(k_count), 0.0);
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double* xi = x.data() + i * x.cols();
    for (Eigen::Index k = 0; k < k_count; ++k) {
      const double w = g.weights[std::size_t(k)];
      row[std::size_t(k)] =
          w > 0.0 ? std::log(w) + log_gauss(xi, g, k) : -std::numeric_limits<double>::infinity();
    }
    const double lse = log_sum_exp(row);
    total += lse;
    for (Eigen::Index k = 0; k < k_count; ++k) log_resp(i, k) = row[std::size_t(k)] - lse;
  }
  return total / double(n);
}

std::vector<Eigen::Index> kmeans_pp_seeds(const Matrix& x, std::size_t k_count, std::mt19937_64& rng) {
  const auto n = x.rows();
  std::vector<Eigen::Index> seeds;
  std::uniform_int_distribution<Eigen::Index> first(0, n - 1);
  seeds.push_back(first(rng));
  std::vector<double> d2(std::size_t(n), std::numeric_limits<double>::infinity());
  while (seeds.size() < k_count) {
    const auto last = seeds.back();
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      d2[std::size_t(i)] = std::min(d2[std::size_t(i)], (x.row(i) - x.row(last)).squaredNorm());
      total += d2[std::size_t(i)];
    }
    Eigen::Index pick = 0;
    if (total > 0.0) {
      std::uniform_real_distribution<double> u(0.0, total);
      double r = u(rng);
      for (pick = 0; pick < n - 1; ++pick) {
        r -= d2[std::size_t(pick)];
        if (r < 0.0) break;
      }
    } else {
      // Every row coincides with a seed; fall back to uniform picks.
      pick = first(rng);
    }
    seeds.push_back(pick);
  }
  return seeds;
}

}  // namespace

double GaussianMixture::mean_log_likelihood(const Matrix& x) const {
  if (x.cols() != means.cols()) throw ValidationError("feature width does not match the mixture");
  Matrix scratch;
  return e_step(x, *this, scratch);
}

Matrix GaussianMixture::sample(std::size_t n, std::mt19937_64& rng) const {
  std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix out(Eigen::Index(n), means.cols());
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const auto k = Eigen::Index(pick(rng));
    for (Eigen::Index j = 0; j < out.cols(); ++j)
      out(i, j) = means(k, j) + std::sqrt(variances(k, j)) * normal(rng);
  }
  return out;
}

MogFit fit_mog(const Matrix& x, const MogFitOptions& options) {
  if (x.rows() == 0 || x.cols() == 0) throw ValidationError("fit_mog needs a non-empty feature matrix");
  if (options.components == 0) throw ValidationError("fit_mog needs at least one component");
  if (!(options.variance_floor > 0.0)) throw ValidationError("variance floor must be > 0");
  if (!x.allFinite()) throw NumericError("fit_mog received non-finite features");

  const auto n = x.rows();
  const auto d = x.cols();
  const auto k_count = std::min<std::size_t>(options.components, std::size_t(n));
  std::mt19937_64 rng(options.seed);

  const Eigen::RowVectorXd mean = x.colwise().mean();
  const Eigen::RowVectorXd var =
      ((x.rowwise() - mean).array().square().colwise().sum() / double(n)).max(options.variance_floor);

  GaussianMixture g;
  g.weights.assign(k_count, 1.0 / double(k_count));
  g.means.resize(Eigen::Index(k_count), d);
  g.variances.resize(Eigen::Index(k_count), d);
  const auto seeds = kmeans_pp_seeds(x, k_count, rng);
  for (std::size_t k = 0; k < k_count; ++k) {
    g.means.row(Eigen::Index(k)) = x.row(seeds[k]);
    g.variances.row(Eigen::Index(k)) = var;
  }

  MogFit fit;
  Matrix log_resp;
  for (std::size_t it = 0; it < options.iterations; ++it) {
    fit.log_likelihood.push_back(e_step(x, g, log_resp));
    const Matrix resp = log_resp.array().exp();
    for (Eigen::Index k = 0; k < Eigen::Index(k_count); ++k) {
      const double nk = resp.col(k).sum();
      if (nk <= 1e-12 * double(n)) {
        // Component lost all mass; drop its weight and keep the rest untouched.
        g.weights[std::size_t(k)] = 0.0;
        continue;
      }
      g.weights[std::size_t(k)] = nk / double(n);
      const Eigen::RowVectorXd mu = (resp.col(k).transpose() * x) / nk;
      Eigen::RowVectorXd v = Eigen::RowVectorXd::Zero(d);
      for (Eigen::Index i = 0; i < n; ++i) v += resp(i, k) * (x.row(i) - mu).array().square().matrix();
      g.means.row(k) = mu;
      g.variances.row(k) = (v / nk).array().max(options.variance_floor).matrix();
    }
    double wsum = 0.0;
    for (double w : g.weights) wsum += w;
    for (double& w : g.weights) w /= wsum;
  }
  fit.log_likelihood.push_back(e_step(x, g, log_resp));
  fit.model = std::move(g);
  return fit;
}

}  // namespace taskvec
