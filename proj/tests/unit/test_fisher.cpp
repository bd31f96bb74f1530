#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "taskvec/errors.hpp"
#include "taskvec/fisher.hpp"

using namespace taskvec;

namespace {

Network linear_net(std::size_t in, std::size_t classes) {
  NetSpec ns;
  ns.input_dim = in;
  ns.head_dims = {classes};
  return Network(ns);
}

Batch gaussian_rows(std::size_t n, std::size_t d, std::uint64_t seed, ClassRange r) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  Batch b;
  b.inputs.resize(Eigen::Index(n), Eigen::Index(d));
  for (Eigen::Index i = 0; i < b.inputs.size(); ++i) b.inputs.data()[i] = g(rng);
  for (std::size_t i = 0; i < n; ++i) b.labels.push_back(int(r.start + i % r.size()));
  return b;
}

FisherDiagonal constant(std::size_t n, double v, std::size_t count) {
  return FisherDiagonal(ParamVector(th::flat(n), std::vector<double>(n, v)), count);
}

}  // namespace

TEST_CASE("uniform two-class model: Fisher is p(1-p) x^2") {
  const auto net = linear_net(3, 2);
  const Batch b = gaussian_rows(40, 3, 1, {0, 2});
  const FisherDiagonal f = local_fisher(net, ParamVector(net.layout()), b, {0, 2});
  CHECK(f.sample_count() == 40);
  for (int c = 0; c < 2; ++c)
    for (Eigen::Index j = 0; j < 3; ++j) {
      const double expect = 0.25 * b.inputs.col(j).squaredNorm() / 40.0;
      CHECK(f.values()[std::size_t(c * 3 + j)] == doctest::Approx(expect).epsilon(1e-13));
    }
  CHECK(f.values()[6] == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(f.values()[7] == doctest::Approx(0.25).epsilon(1e-14));
}

TEST_CASE("Fisher entries are nonnegative and vanish outside the range") {
  NetSpec ns;
  ns.input_dim = 4;
  ns.hidden = {5};
  ns.head_dims = {2, 3};
  const Network net(ns);
  const ParamVector theta = th::randn(net.layout(), 3);
  const FisherDiagonal f = local_fisher(net, theta, gaussian_rows(20, 4, 2, {2, 5}), {2, 5});
  for (double v : f.values().values()) CHECK(v >= 0.0);
  for (double v : f.values().entry("head.1.weight")) CHECK(v == 0.0);
  CHECK_THROWS_AS(local_fisher(net, theta, Batch{}, {2, 5}), ValidationError);
}

TEST_CASE("enumerated Fisher agrees with label sampling") {
  NetSpec ns;
  ns.input_dim = 3;
  ns.hidden = {3};
  ns.head_dims = {3};
  const Network net(ns);
  const ParamVector theta = th::randn(net.layout(), 11, 0.8);
  const ClassRange range{0, 3};
  const Batch data = gaussian_rows(25, 3, 12, range);
  const FisherDiagonal exact = local_fisher(net, theta, data, range);

  const std::size_t draws = 10000;
  const std::size_t p = theta.size();
  std::vector<double> sum(p, 0.0), sum_sq(p, 0.0);
  std::mt19937_64 rng(13);
  std::vector<double> probs;
  for (std::size_t k = 0; k < draws; ++k) {
    const std::size_t i = rng() % data.size();
    const double* row = data.inputs.data() + i * 3;
    const auto grads = net.log_prob_grads(theta, {row, 3}, range, probs);
    std::discrete_distribution<int> pick(probs.begin(), probs.end());
    const auto& g = grads[std::size_t(pick(rng))];
    for (std::size_t j = 0; j < p; ++j) {
      const double s = g[j] * g[j];
      sum[j] += s;
      sum_sq[j] += s * s;
    }
  }
  std::size_t outside = 0;
  for (std::size_t j = 0; j < p; ++j) {
    const double mean = sum[j] / draws;
    const double se = std::sqrt(std::max(0.0, sum_sq[j] / draws - mean * mean) / draws);
    if (std::abs(mean - exact.values()[j]) > 3.0 * se + 1e-15) ++outside;
  }
  CHECK(outside == 0);
}

TEST_CASE("accumulation examples") {
  const FisherDiagonal local = constant(3, 2.0, 50);
  const FisherDiagonal first = accumulate(FisherDiagonal{}, local, 50);
  CHECK(first.values().raw() == local.values().raw());
  CHECK(first.sample_count() == 50);

  const FisherDiagonal twice = accumulate(first, local, 50);
  CHECK(twice.values().raw() == local.values().raw());
  CHECK(twice.sample_count() == 100);

  FisherDiagonal g = accumulate(FisherDiagonal{}, constant(1, 1.0, 100), 100);
  g = accumulate(g, constant(1, 3.0, 300), 300);
  CHECK(g.values()[0] == 2.5);
  CHECK(g.sample_count() == 400);

  CHECK(accumulate(constant(1, 1.0, 10), constant(1, 3.0, 30), 30, AccumulateMode::Sum).values()[0] == 4.0);
}

TEST_CASE("accumulation pads new heads with the local value") {
  ParamLayout small = th::flat(2);
  ParamLayout big = small;
  big.append("head.1.weight", {1, 2}, EntryKind::HeadWeight, 1);
  const FisherDiagonal global(ParamVector(small, {1.0, 1.0}), 10);
  const FisherDiagonal local(ParamVector(big, {3.0, 3.0, 5.0, 7.0}), 10);
  const FisherDiagonal out = accumulate(global, local, 10);
  CHECK(out.values().raw() == std::vector<double>{2.0, 2.0, 5.0, 7.0});
  CHECK_THROWS_AS(accumulate(local, global, 10), LayoutError);
}

TEST_CASE("weighted mean is order invariant") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 4.0);
  std::vector<FisherDiagonal> locals;
  for (int t = 0; t < 6; ++t) {
    std::vector<double> v(8);
    for (auto& x : v) x = u(rng);
    locals.emplace_back(ParamVector(th::flat(8), v), std::size_t(10 + 37 * t));
  }
  FisherDiagonal fwd, rev;
  for (std::size_t t = 0; t < locals.size(); ++t) {
    fwd = accumulate(fwd, locals[t], locals[t].sample_count());
    const auto& l = locals[locals.size() - 1 - t];
    rev = accumulate(rev, l, l.sample_count());
  }
  for (std::size_t j = 0; j < 8; ++j) CHECK(fwd.values()[j] == doctest::Approx(rev.values()[j]).epsilon(1e-12));
}

TEST_CASE("full Fisher diagonal equals the diagonal estimate") {
  NetSpec ns;
  ns.input_dim = 3;
  ns.hidden = {4};
  ns.head_dims = {2};
  const Network net(ns);
  const ParamVector theta = th::randn(net.layout(), 21);
  const Batch b = gaussian_rows(15, 3, 22, {0, 2});
  const Eigen::MatrixXd full = full_fisher(net, theta, b, {0, 2});
  const FisherDiagonal diag = local_fisher(net, theta, b, {0, 2});
  for (std::size_t j = 0; j < theta.size(); ++j)
    CHECK(std::abs(full(Eigen::Index(j), Eigen::Index(j)) - diag.values()[j]) <= 1e-8 * full.diagonal().maxCoeff());
  CHECK((full - full.transpose()).cwiseAbs().maxCoeff() == 0.0);
}
