#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "taskvec/errors.hpp"
#include "taskvec/optim.hpp"
#include "taskvec/trainers.hpp"

using namespace taskvec;

namespace {

TaskStream small_stream(std::size_t tasks, std::uint64_t seed = 0) {
  BlobOptions b;
  b.tasks = tasks;
  b.classes_per_task = 2;
  b.dim = 6;
  b.samples_per_class = 40;
  b.mean_scale = 1.5;
  b.seed = seed;
  return gen_blobs(b);
}

Network small_net(std::size_t dim) {
  NetSpec ns;
  ns.input_dim = dim;
  ns.hidden = {8};
  return Network(ns);
}

TrainConfig quick(Algo algo) {
  TrainConfig c;
  c.algo = algo;
  c.lr = 0.05;
  c.epochs = 2;
  c.pre_epochs = 2;
  c.mog_components = 2;
  c.mog_samples = 16;
  c.align_epochs = 1;
  c.reg.alpha = c.reg.alpha_cls = 1.0;
  c.reg.beta = c.reg.beta_cls = 1.0;
  return c;
}

// The preset used for the command-line defaults, on a smaller network.
TrainConfig desk(double alpha) {
  TrainConfig c;
  c.algo = Algo::ITA;
  c.lr = 0.5;
  c.epochs = 10;
  c.reg.alpha = c.reg.alpha_cls = alpha;
  return c;
}

}  // namespace

TEST_CASE("AdamW first steps match a hand computation") {
  AdamWOptions o;
  o.lr = 0.1;
  AdamW opt(2, o);
  std::vector<double> p{1.0, -2.0};
  opt.step(p, std::vector<double>{0.5, -4.0});
  // Bias-corrected first step moves each coordinate by lr * g / (|g| + eps).
  CHECK(p[0] == doctest::Approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8)).epsilon(1e-15));
  CHECK(p[1] == doctest::Approx(-2.0 + 0.1 * 4.0 / (4.0 + 1e-8)).epsilon(1e-15));

  opt.step(p, std::vector<double>{0.25, 0.0});
  const double m = 0.9 * 0.05 + 0.1 * 0.25, v = 0.999 * 0.00025 + 0.001 * 0.0625;
  const double step = 0.1 * (m / (1 - 0.81)) / (std::sqrt(v / (1 - 0.999 * 0.999)) + 1e-8);
  CHECK(p[0] == doctest::Approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8) - step).epsilon(1e-14));
  CHECK(opt.steps() == 2);

  AdamWOptions wd = o;
  wd.weight_decay = 0.5;
  AdamW decay(1, wd);
  std::vector<double> q{2.0};
  decay.step(q, std::vector<double>{0.0});
  CHECK(q[0] == doctest::Approx(2.0 - 0.1 * 0.5 * 2.0).epsilon(1e-15));

  CHECK_THROWS_AS(opt.step(p, std::vector<double>{1.0}), ValidationError);
  o.lr = 0.0;
  CHECK_THROWS_AS(AdamW(1, o), ValidationError);
}

TEST_CASE("pre-consolidation leaves the backbone alone and folds in the Fisher") {
  const auto stream = small_stream(2);
  const Network net = small_net(6);
  Learner learner(net, net.init(3));
  TrainConfig cfg = quick(Algo::ITA);
  cfg.pre_epochs = 5;
  cfg.align_epochs = 3;

  const ParamVector before = learner.theta0();
  const auto r1 = pre_consolidate(learner, stream.tasks[0], cfg);
  CHECK(learner.fisher.sample_count() == stream.tasks[0].train.size());
  CHECK(r1.aligned_accuracy >= r1.probe_accuracy - 0.02);
  const auto& l = learner.theta0().layout();
  CHECK(l.num_heads() == 1);
  for (std::size_t e = 0; e < before.layout().num_entries(); ++e)
    CHECK(th::bitwise_equal(before.entry(e), learner.theta0().entry(e)));

  const ParamVector at1 = learner.theta0();
  learner.pool.add(train_task_ita(learner, stream.tasks[0].train, stream.tasks[0].range, cfg).tau);
  const auto r2 = pre_consolidate(learner, stream.tasks[1], cfg);
  CHECK(learner.fisher.sample_count() == stream.tasks[0].train.size() + stream.tasks[1].train.size());
  CHECK(r2.aligned_accuracy >= r2.probe_accuracy - 0.02);
  for (std::size_t e = 0; e < at1.layout().num_entries(); ++e)
    if (!at1.layout().entry(e).is_head())
      CHECK(th::bitwise_equal(at1.entry(e), learner.theta0().entry(e)));
  CHECK(learner.mogs.size() == 4);
}

TEST_CASE("mixture size is clamped to the rows of a class") {
  const auto stream = small_stream(1);
  const Network net = small_net(6);
  Learner learner(net, net.init(3));
  TrainConfig cfg = quick(Algo::ITA);
  cfg.mog_components = 1000;
  const auto r = pre_consolidate(learner, stream.tasks[0], cfg);
  REQUIRE(r.mog_components.size() == 2);
  for (std::size_t c = 0; c < 2; ++c) {
    std::size_t rows = 0;
    for (int y : stream.tasks[0].train.labels) rows += y == int(c);
    CHECK(r.mog_components[c] == rows);
  }
}

TEST_CASE("training requires the head to be added first") {
  const auto stream = small_stream(1);
  const Network net = small_net(6);
  Learner learner(net, net.init(3));
  CHECK_THROWS_AS(train_task_ita(learner, stream.tasks[0].train, stream.tasks[0].range, quick(Algo::ITA)),
                  ValidationError);
  Learner headed(net, add_head(net, net.init(3), 2));
  CHECK_THROWS_AS(run_sequence(stream, net, headed.theta0(), quick(Algo::ITA)), ValidationError);
  const Network wide = small_net(7);
  CHECK_THROWS_AS(run_sequence(stream, wide, wide.init(1), quick(Algo::ITA)), LayoutError);
}

TEST_CASE("a huge anchor keeps the task vector near zero") {
  const auto stream = small_stream(2);
  const Network net = small_net(6);
  Learner learner(net, net.init(3));
  TrainConfig cfg = quick(Algo::ITA);
  cfg.lr = TrainConfig::default_lr(Variant::FFT);
  cfg.epochs = 3;
  cfg.reg.alpha = cfg.reg.alpha_cls = 1e9;
  pre_consolidate(learner, stream.tasks[0], cfg);
  learner.pool.add(train_task_ita(learner, stream.tasks[0].train, stream.tasks[0].range, cfg).tau);
  pre_consolidate(learner, stream.tasks[1], cfg);
  const auto fit = train_task_ita(learner, stream.tasks[1].train, stream.tasks[1].range, cfg);
  const double tau = fit.tau.materialize(learner.theta0()).norm();
  CHECK(tau <= 1e-3 * learner.theta0().norm());
}

TEST_CASE("zero anchor strength is plain fine-tuning") {
  const auto stream = small_stream(3);
  const Network net = small_net(6);
  TrainConfig ita = quick(Algo::ITA);
  ita.reg = RegConfig{};
  const TrainConfig ft = [&] {
    TrainConfig c = quick(Algo::FINETUNE);
    return c;
  }();
  const auto a = run_sequence(stream, net, net.init(5), ita);
  const auto b = run_sequence(stream, net, net.init(5), ft);
  for (std::size_t t = 0; t < 3; ++t) {
    REQUIRE(a.result.tasks[t].epoch_loss.size() == b.result.tasks[t].epoch_loss.size());
    for (std::size_t e = 0; e < a.result.tasks[t].epoch_loss.size(); ++e)
      CHECK(std::abs(a.result.tasks[t].epoch_loss[e] - b.result.tasks[t].epoch_loss[e]) <= 1e-10);
    CHECK(th::bitwise_equal(a.learner.pool.vectors()[t].params(), b.learner.pool.vectors()[t].params()));
  }
  CHECK(a.result.fa == b.result.fa);
}

TEST_CASE("ensemble training of the first task is unregularised individual training") {
  const auto stream = small_stream(1);
  const Network net = small_net(6);
  for (Variant v : {Variant::FFT, Variant::LoRA, Variant::IA3}) {
    CAPTURE(to_string(v));
    Learner learner(net, net.init(4));
    TrainConfig iel = quick(Algo::IEL);
    iel.variant = v;
    iel.rank = 2;
    pre_consolidate(learner, stream.tasks[0], iel);
    TrainConfig ita = iel;
    ita.algo = Algo::ITA;
    ita.reg = RegConfig{};
    const auto a = train_task_iel(learner, stream.tasks[0].train, stream.tasks[0].range, iel);
    const auto b = train_task_ita(learner, stream.tasks[0].train, stream.tasks[0].range, ita);
    CHECK(th::bitwise_equal(a.tau.params(), b.tau.params()));
    CHECK(a.epoch_loss == b.epoch_loss);
  }
}

TEST_CASE("cached and explicit ensemble bases train identically") {
  const auto stream = small_stream(4);
  const Network net = small_net(6);
  TrainConfig cached = quick(Algo::IEL);
  cached.lr = 0.01;
  TrainConfig expl = cached;
  expl.cached_base = false;
  const auto a = run_sequence(stream, net, net.init(2), cached);
  const auto b = run_sequence(stream, net, net.init(2), expl);
  for (std::size_t t = 0; t < 4; ++t)
    CHECK(th::bitwise_equal(a.learner.pool.vectors()[t].params(), b.learner.pool.vectors()[t].params()));
  CHECK(th::bitwise_equal(a.learner.pool.compose().values(), b.learner.pool.compose().values()));
}

TEST_CASE("a single-task run scores the individual model") {
  const auto stream = small_stream(1);
  const Network net = small_net(6);
  const auto out = run_sequence(stream, net, net.init(8), quick(Algo::ITA));
  const ParamVector theta = out.learner.theta0() + out.learner.pool.displacement(1);
  const auto& test = stream.tasks[0].test;
  CHECK(out.result.fa == accuracy(net.forward(theta, test.inputs), test.labels));
  CHECK(out.result.ff == 0.0);
  REQUIRE(out.result.risk.size() == 1);
  CHECK(out.result.risk[0].composed == doctest::Approx(out.result.risk[0].individual_mean).epsilon(1e-12));
}

TEST_CASE("runs are reproducible") {
  const auto stream = small_stream(3);
  const Network net = small_net(6);
  for (Algo algo : {Algo::ITA, Algo::IEL}) {
    const auto a = run_sequence(stream, net, net.init(1), quick(algo));
    const auto b = run_sequence(stream, net, net.init(1), quick(algo));
    CHECK(th::bitwise_equal(a.learner.pool.compose().values(), b.learner.pool.compose().values()));
    CHECK(a.result.fa == b.result.fa);
    CHECK(a.result.ff == b.result.ff);
  }
  TrainConfig other = quick(Algo::ITA);
  other.seed = 1;
  const auto a = run_sequence(stream, net, net.init(1), quick(Algo::ITA));
  const auto c = run_sequence(stream, net, net.init(1), other);
  CHECK_FALSE(th::bitwise_equal(a.learner.pool.compose().values(), c.learner.pool.compose().values()));
}

TEST_CASE("the anchor halves the Fisher distance on the default blobs") {
  BlobOptions b;
  b.mean_scale = 1.5;
  const auto stream = gen_blobs(b);
  NetSpec ns;
  ns.input_dim = b.dim;
  ns.hidden = {16, 16};
  const Network net(ns);
  const auto with = run_sequence(stream, net, net.init(1), desk(10.0));
  const auto without = run_sequence(stream, net, net.init(1), desk(0.0));
  for (std::size_t t = 0; t < stream.num_tasks(); ++t) {
    CAPTURE(t);
    CHECK(with.result.tasks[t].ewc * 2.0 <= without.result.tasks[t].ewc);
  }
  CHECK(with.result.fa > without.result.fa);
}

TEST_CASE("plain fine-tuning forgets earlier tasks") {
  BlobOptions b;
  b.mean_scale = 1.5;
  const auto stream = gen_blobs(b);
  NetSpec ns;
  ns.input_dim = b.dim;
  ns.hidden = {16, 16};
  const Network net(ns);
  TrainConfig c = desk(0.0);
  c.algo = Algo::FINETUNE;
  const auto out = run_sequence(stream, net, net.init(1), c);
  double diag = 0.0;
  for (std::size_t t = 0; t < stream.num_tasks(); ++t) diag += out.result.acc.at(t, t) / double(stream.num_tasks());
  MESSAGE("just-trained accuracy " << diag << ", final " << out.result.fa);
  CHECK(diag - out.result.fa >= 0.3);
}

TEST_CASE("config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = TrainConfig{};
  c.lr = -1.0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = TrainConfig{};
  c.reg.alpha = std::nan("");
  CHECK_THROWS_AS(c.validate(), ValidationError);
  CHECK(algo_from_string("IEL") == Algo::IEL);
  CHECK(to_string(Algo::FINETUNE) == "FINETUNE");
  CHECK_THROWS_AS(algo_from_string("nope"), ValidationError);
}

TEST_CASE("parallel individual training reproduces the sequential run") {
  const auto stream = small_stream(4);
  const Network net = small_net(6);
  for (Variant v : {Variant::FFT, Variant::LoRA, Variant::IA3}) {
    for (Algo algo : {Algo::ITA, Algo::FINETUNE}) {
      CAPTURE(to_string(v));
      CAPTURE(to_string(algo));
      TrainConfig seq = quick(algo);
      seq.variant = v;
      seq.rank = 2;
      TrainConfig par = seq;
      par.parallel_tasks = true;
      par.threads = 3;
      std::vector<double> seq_risk, par_risk;
      const auto a = run_sequence(stream, net, net.init(6), seq,
                                  [&](const Learner& l, std::size_t, const TaskStream&) {
                                    seq_risk.push_back(ewc_penalty(l.pool.cum_sum(), l.fisher));
                                  });
      const auto b = run_sequence(stream, net, net.init(6), par,
                                  [&](const Learner& l, std::size_t, const TaskStream&) {
                                    par_risk.push_back(ewc_penalty(l.pool.cum_sum(), l.fisher));
                                  });
      CHECK(th::bitwise_equal(a.learner.pool.compose().values(), b.learner.pool.compose().values()));
      CHECK(th::bitwise_equal(a.learner.fisher.values().values(), b.learner.fisher.values().values()));
      CHECK(seq_risk == par_risk);
      for (std::size_t k = 0; k < 4; ++k) {
        CHECK(a.result.risk[k].composed == b.result.risk[k].composed);
        CHECK(a.result.risk[k].proxy_composed == b.result.risk[k].proxy_composed);
        CHECK(a.result.tasks[k].epoch_loss == b.result.tasks[k].epoch_loss);
        for (std::size_t t = 0; t <= k; ++t) CHECK(a.result.acc.at(k, t) == b.result.acc.at(k, t));
      }
    }
  }
  TrainConfig iel = quick(Algo::IEL);
  iel.parallel_tasks = true;
  CHECK_THROWS_AS(run_sequence(stream, net, net.init(6), iel), ValidationError);
}
