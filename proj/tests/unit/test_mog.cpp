#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "taskvec/errors.hpp"
#include "taskvec/mog.hpp"

using namespace taskvec;

namespace {

Matrix gaussian(std::size_t n, std::vector<double> mean, double sd, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  Matrix x(Eigen::Index(n), Eigen::Index(mean.size()));
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j) x(i, j) = mean[std::size_t(j)] + sd * g(rng);
  return x;
}

}  // namespace

TEST_CASE("one component is the maximum-likelihood Gaussian") {
  const Matrix x = gaussian(200, {1.0, -2.0, 0.5}, 0.7, 1);
  MogFitOptions o;
  o.components = 1;
  const auto fit = fit_mog(x, o);
  REQUIRE(fit.model.components() == 1);
  CHECK(fit.model.weights[0] == doctest::Approx(1.0));
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const double mean = x.col(j).mean();
    const double var = (x.col(j).array() - mean).square().mean();
    CHECK(fit.model.means(0, j) == doctest::Approx(mean).epsilon(1e-12));
    CHECK(fit.model.variances(0, j) == doctest::Approx(var).epsilon(1e-10));
  }
  // Closed-form average log density of a diagonal Gaussian at its MLE.
  double expected = 0.0;
  for (Eigen::Index j = 0; j < x.cols(); ++j)
    expected += -0.5 * (std::log(2.0 * std::numbers::pi * fit.model.variances(0, j)) + 1.0);
  CHECK(fit.model.mean_log_likelihood(x) == doctest::Approx(expected).epsilon(1e-10));
}

TEST_CASE("two separated clusters are recovered") {
  Matrix x(400, 2);
  x.topRows(200) = gaussian(200, {-5.0, 0.0}, 0.5, 2);
  x.bottomRows(200) = gaussian(200, {5.0, 3.0}, 0.5, 3);
  MogFitOptions o;
  o.components = 2;
  o.iterations = 50;
  const auto fit = fit_mog(x, o);
  REQUIRE(fit.model.components() == 2);
  const Eigen::Index lo = fit.model.means(0, 0) < fit.model.means(1, 0) ? 0 : 1;
  CHECK(std::abs(fit.model.means(lo, 0) + 5.0) < 0.1);
  CHECK(std::abs(fit.model.means(lo, 1) - 0.0) < 0.1);
  CHECK(std::abs(fit.model.means(1 - lo, 0) - 5.0) < 0.1);
  CHECK(std::abs(fit.model.means(1 - lo, 1) - 3.0) < 0.1);
  CHECK(fit.model.weights[0] == doctest::Approx(0.5).epsilon(0.05));
}

TEST_CASE("EM never decreases the likelihood") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    CAPTURE(seed);
    Matrix x(150, 3);
    x.topRows(50) = gaussian(50, {0, 0, 0}, 1.0, seed);
    x.middleRows(50, 50) = gaussian(50, {2, 1, 0}, 0.5, seed + 100);
    x.bottomRows(50) = gaussian(50, {-1, 3, 2}, 0.8, seed + 200);
    MogFitOptions o;
    o.components = 4;
    o.iterations = 30;
    o.seed = seed;
    const auto fit = fit_mog(x, o);
    REQUIRE(fit.log_likelihood.size() >= 2);
    for (std::size_t i = 1; i < fit.log_likelihood.size(); ++i)
      CHECK(fit.log_likelihood[i] >= fit.log_likelihood[i - 1] - 1e-9);
    CHECK(fit.log_likelihood.back() == doctest::Approx(fit.model.mean_log_likelihood(x)).epsilon(1e-12));
  }
}

TEST_CASE("component count is clamped and variances are floored") {
  Matrix x(3, 2);
  x << 1, 1, 1, 1, 1, 1;
  MogFitOptions o;
  o.components = 5;
  const auto fit = fit_mog(x, o);
  CHECK(fit.model.components() == 3);
  CHECK((fit.model.variances.array() >= o.variance_floor).all());
  CHECK(std::isfinite(fit.model.mean_log_likelihood(x)));
  double total = 0.0;
  for (double w : fit.model.weights) total += w;
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));

  CHECK_THROWS_AS(fit_mog(Matrix(0, 2), o), ValidationError);
}

TEST_CASE("samples follow the mixture") {
  GaussianMixture m;
  m.weights = {0.25, 0.75};
  m.means.resize(2, 1);
  m.means << -2.0, 2.0;
  m.variances.resize(2, 1);
  m.variances << 0.25, 1.0;
  std::mt19937_64 rng(9);
  const Matrix s = m.sample(40000, rng);
  REQUIRE(s.rows() == 40000);
  const double mean = s.col(0).mean();
  const double expected_mean = 0.25 * -2.0 + 0.75 * 2.0;
  const double expected_var = 0.25 * (0.25 + 4.0) + 0.75 * (1.0 + 4.0) - expected_mean * expected_mean;
  CHECK(std::abs(mean - expected_mean) < 4.0 * std::sqrt(expected_var / 40000.0));
  const double frac_low = double((s.col(0).array() < 0.0).count()) / 40000.0;
  CHECK(frac_low == doctest::Approx(0.25).epsilon(0.05));
  std::mt19937_64 again(9);
  CHECK(m.sample(40000, again) == s);
}
