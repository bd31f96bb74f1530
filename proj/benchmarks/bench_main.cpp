#include <benchmark/benchmark.h>

#include <random>

#include "taskvec/fisher.hpp"
#include "taskvec/pool.hpp"
#include "taskvec/regularizers.hpp"
#include "taskvec/trainers.hpp"

using namespace taskvec;

namespace {

ParamLayout flat(std::size_t n) {
  ParamLayout l;
  l.append("w", {n}, EntryKind::BackboneWeight);
  return l;
}

ParamVector randn(const ParamLayout& l, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  ParamVector v(l);
  for (auto& x : v.values()) x = g(rng);
  return v;
}

Pool filled_pool(std::size_t params, std::size_t tasks) {
  const auto l = flat(params);
  Pool p(randn(l, 0));
  for (std::size_t t = 0; t < tasks; ++t) p.add(TaskVector::from_dense(randn(l, t + 1)));
  return p;
}

void BM_Compose(benchmark::State& state) {
  const Pool p = filled_pool(100000, std::size_t(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(p.compose());
}
BENCHMARK(BM_Compose)->Arg(1)->Arg(10)->Arg(50);

void BM_CumulativeBase(benchmark::State& state) {
  const auto n = std::size_t(state.range(0));
  const Pool p = filled_pool(100000, n);
  for (auto _ : state) benchmark::DoNotOptimize(p.cumulative_base(n + 1));
}
BENCHMARK(BM_CumulativeBase)->Arg(1)->Arg(10)->Arg(50);

void BM_ExplicitSum(benchmark::State& state) {
  const auto n = std::size_t(state.range(0));
  const Pool p = filled_pool(100000, n);
  for (auto _ : state) benchmark::DoNotOptimize(p.explicit_sum(n));
}
BENCHMARK(BM_ExplicitSum)->Arg(1)->Arg(10)->Arg(50);

void BM_OmegaGrad(benchmark::State& state) {
  const auto l = flat(100000);
  const ParamVector tau = randn(l, 1), prev = randn(l, 2);
  ParamVector f = randn(l, 3);
  for (auto& x : f.values()) x = x * x;
  const FisherDiagonal fisher(f, 1);
  for (auto _ : state) benchmark::DoNotOptimize(omega_grad_dense(tau, prev, 5, fisher));
}
BENCHMARK(BM_OmegaGrad);

void BM_LocalFisher(benchmark::State& state) {
  NetSpec ns;
  ns.input_dim = 16;
  ns.hidden = {64, 64};
  ns.head_dims = {std::size_t(state.range(0))};
  const Network net(ns);
  const ParamVector theta = net.init(1);
  BlobOptions b;
  b.tasks = 1;
  b.classes_per_task = std::size_t(state.range(0));
  b.samples_per_class = 50;
  const Batch data = gen_blobs(b).tasks[0].train;
  for (auto _ : state) benchmark::DoNotOptimize(local_fisher(net, theta, data, {0, b.classes_per_task}));
}
BENCHMARK(BM_LocalFisher)->Arg(2)->Arg(10)->Unit(benchmark::kMillisecond);

void BM_EnsembleTask(benchmark::State& state) {
  BlobOptions b;
  b.tasks = 6;
  b.dim = 32;
  b.samples_per_class = 60;
  const TaskStream stream = gen_blobs(b);
  NetSpec ns;
  ns.input_dim = b.dim;
  ns.hidden = {128, 128};
  const Network net(ns);
  TrainConfig c;
  c.algo = Algo::IEL;
  c.lr = 0.01;
  c.epochs = 1;
  c.pre_epochs = 1;
  c.mog_components = 1;
  c.mog_samples = 8;
  c.align_epochs = 0;
  c.reg.beta = c.reg.beta_cls = 1.0;
  c.cached_base = state.range(0) != 0;
  Learner learner(net, net.init(1));
  for (std::size_t t = 0; t + 1 < b.tasks; ++t) {
    pre_consolidate(learner, stream.tasks[t], c);
    learner.pool.add(train_task_iel(learner, stream.tasks[t].train, stream.tasks[t].range, c).tau);
  }
  pre_consolidate(learner, stream.tasks.back(), c);
  const auto& last = stream.tasks.back();
  for (auto _ : state) benchmark::DoNotOptimize(train_task_iel(learner, last.train, last.range, c));
  state.SetLabel(c.cached_base ? "cached" : "explicit");
}
BENCHMARK(BM_EnsembleTask)->Arg(1)->Arg(0)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
