#include "taskvec/trainers.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <thread>

#include "taskvec/errors.hpp"
#include "taskvec/optim.hpp"
#include "parallel.hpp"

namespace taskvec {

std::string_view to_string(Algo algo) {
  switch (algo) {
    case Algo::ITA: return "ITA";
    case Algo::IEL: return "IEL";
    case Algo::FINETUNE: return "FINETUNE";
  }
  return "?";
}

Algo algo_from_string(std::string_view text) {
  if (text == "ITA" || text == "ita") return Algo::ITA;
  if (text == "IEL" || text == "iel") return Algo::IEL;
  if (text == "FINETUNE" || text == "finetune") return Algo::FINETUNE;
  throw ValidationError("unknown algorithm '" + std::string(text) + "' (expected ITA, IEL or FINETUNE)");
}

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ValidationError("lr must be > 0");
  if (!(pre_lr > 0.0) || !std::isfinite(pre_lr)) throw ValidationError("pre_lr must be > 0");
  if (!(align_lr > 0.0) || !std::isfinite(align_lr)) throw ValidationError("align_lr must be > 0");
  if (mog_components < 1) throw ValidationError("mog_components must be >= 1");
  if (mog_samples < 1) throw ValidationError("mog_samples must be >= 1");
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (variant == Variant::LoRA && rank < 1) throw ValidationError("LoRA rank must be >= 1");
  if (weight_decay < 0.0 || !std::isfinite(weight_decay)) throw ValidationError("weight_decay must be >= 0");
  if (parallel_tasks && algo == Algo::IEL)
    throw ValidationError("parallel_tasks needs independent task vectors (ITA or FINETUNE)");
  reg.validate();
}

Learner::Learner(Network network, ParamVector theta0) : net(std::move(network)), pool(std::move(theta0)) {
  net.check(pool.theta0());
}

namespace {

double local_accuracy(const Matrix& logits, const std::vector<int>& labels, ClassRange range) {
  if (labels.empty()) return 0.0;
  const auto block = logits.middleCols(Eigen::Index(range.start), Eigen::Index(range.size()));
  std::size_t hits = 0;
  for (Eigen::Index i = 0; i < block.rows(); ++i) {
    Eigen::Index arg = 0;
    block.row(i).maxCoeff(&arg);
    if (int(range.start) + int(arg) == labels[std::size_t(i)]) ++hits;
  }
  return double(hits) / double(labels.size());
}

// Shared fine-tuning loop. `ensemble` selects the composed forward pass and
// the Omega barrier; otherwise the individual model and the EWC anchor.
TaskFit fine_tune(const Network& net, const ParamVector& theta0, const FisherDiagonal& global_fisher,
                  const Pool& pool, std::size_t t, const Batch& train, ClassRange range, const TrainConfig& cfg,
                  bool ensemble) {
  cfg.validate();
  if (train.empty()) throw ValidationError("cannot fine-tune on an empty task");
  const auto& layout = theta0.layout();
  if (layout.num_heads() != int(t) || head_range(layout, int(t)) != range)
    throw ValidationError("pre_consolidate must add the head for task " + std::to_string(t) + " first");

  AdapterOptions ao;
  ao.rank = cfg.rank;
  ao.seed = mix_seed(cfg.seed, 2000 + t);
  TaskFit fit;
  fit.tau = TaskVector::zeros(cfg.variant, layout, ao);
  TaskVector& tv = fit.tau;

  const bool plain = cfg.algo == Algo::FINETUNE;
  const double body = plain ? 0.0 : (ensemble ? cfg.reg.beta : cfg.reg.alpha);
  const double head = plain ? 0.0 : (ensemble ? cfg.reg.beta_cls : cfg.reg.alpha_cls);
  const bool regularize = body > 0.0 || head > 0.0;
  const ParamVector mask = strength_mask(layout, body, head);
  const FisherDiagonal fisher =
      global_fisher.empty() ? FisherDiagonal(layout) : global_fisher.extended_to(layout);
  const bool decoupled = cfg.reg.decoupled_for(cfg.variant);

  AdamWOptions oo;
  oo.lr = cfg.lr;
  oo.weight_decay = cfg.weight_decay;
  AdamW opt(tv.num_params(), oo);

  const double inv_t = 1.0 / double(t);
  // Cached representation: fixed for the whole task.
  ParamVector base;
  ParamVector sum_prev;
  if (ensemble && cfg.cached_base) {
    base = pool.cumulative_base(t);
    sum_prev = pool.cum_sum();
  }

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(mix_seed(cfg.seed, 3000 + t));
  const auto t_start = std::chrono::steady_clock::now();

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      const Batch mb = train.rows({order.begin() + std::ptrdiff_t(begin), order.begin() + std::ptrdiff_t(end)});

      const ParamVector disp = tv.materialize(theta0);
      ParamVector theta;
      if (!ensemble) {
        theta = theta0 + disp;
      } else {
        if (!cfg.cached_base) {
          // Explicit representation: rebuild the running sum from every stored vector.
          sum_prev = pool.explicit_sum(t - 1);
          ParamVector scaled = sum_prev;
          scaled /= double(t);
          base = theta0 + scaled;
        }
        theta = base;
        theta.add_scaled(disp, inv_t);
      }

      LossGrad lg = net.loss_and_grad(theta, mb, range);
      epoch_loss += lg.loss * double(end - begin);
      if (ensemble) lg.grad *= inv_t;
      std::vector<double> g = tv.pullback(lg.grad, theta0);

      if (regularize) {
        const ParamVector dense = ensemble ? omega_grad_dense(disp, sum_prev, t, fisher, &mask)
                                           : ewc_grad_dense(disp, fisher, &mask);
        const std::vector<double> r = tv.pullback(dense, theta0);
        if (decoupled) {
          auto p = tv.mutable_params();
          for (std::size_t i = 0; i < p.size(); ++i) p[i] -= cfg.lr * r[i];
        } else {
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += r[i];
        }
      }
      opt.step(tv.mutable_params(), g);
      for (double v : tv.params())
        if (!std::isfinite(v))
          throw NumericError("task " + std::to_string(t) + ": parameters diverged in epoch " +
                             std::to_string(epoch + 1) + " (lr " + std::to_string(cfg.lr) + ")");
    }
    fit.epoch_loss.push_back(epoch_loss / double(train.size()));
  }
  fit.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  fit.ewc = ewc_penalty(tv.materialize(theta0), fisher);
  return fit;
}

}  // namespace

TaskFit train_task_ita(const Learner& learner, const Batch& train, ClassRange range, const TrainConfig& cfg) {
  return fine_tune(learner.net, learner.theta0(), learner.fisher, learner.pool, learner.pool.count() + 1, train,
                   range, cfg, false);
}

TaskFit train_task_iel(const Learner& learner, const Batch& train, ClassRange range, const TrainConfig& cfg) {
  return fine_tune(learner.net, learner.theta0(), learner.fisher, learner.pool, learner.pool.count() + 1, train,
                   range, cfg, true);
}

namespace {

// Pre-consolidation without the pool-size check, so all tasks can be
// consolidated ahead of fine-tuning.
PreConsolidation consolidate(Learner& learner, const TaskData& task, const TrainConfig& cfg) {
  cfg.validate();
  if (task.train.empty()) throw ValidationError("pre-consolidation needs training data");
  const Network& net = learner.net;
  const int t = learner.theta0().layout().num_heads() + 1;
  if (task.range.start != learner.classes_seen() || task.range.size() == 0)
    throw ValidationError("task class range must start right after the classes already seen");

  PreConsolidation report;
  ParamVector theta = add_head(net, learner.theta0(), task.range.size());

  ProbeOptions probe;
  probe.epochs = cfg.pre_epochs;
  probe.lr = cfg.pre_lr;
  probe.batch_size = cfg.batch_size;
  probe.seed = mix_seed(cfg.seed, 4000 + std::uint64_t(t));
  theta = linear_probe(net, theta, task.train, t, probe);

  const Matrix feats = net.features(theta, task.train.inputs);
  report.probe_accuracy = local_accuracy(net.head_logits(theta, feats), task.train.labels, task.range);

  for (std::size_t c = task.range.start; c < task.range.end; ++c) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < task.train.size(); ++i)
      if (task.train.labels[i] == int(c)) rows.push_back(i);
    if (rows.empty()) throw ValidationError("class " + std::to_string(c) + " has no training samples");
    Matrix fc(Eigen::Index(rows.size()), feats.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) fc.row(Eigen::Index(i)) = feats.row(Eigen::Index(rows[i]));
    MogFitOptions mo;
    mo.components = cfg.mog_components;
    mo.iterations = cfg.mog_iterations;
    mo.seed = mix_seed(cfg.seed, 5000 + c);
    auto fit = fit_mog(fc, mo);
    report.mog_components.push_back(fit.model.components());
    learner.mogs[int(c)] = std::move(fit.model);
  }

  if (cfg.align_epochs > 0) {
    const std::size_t total = task.range.end;
    const std::size_t n = cfg.mog_samples;
    std::mt19937_64 rng(mix_seed(cfg.seed, 6000 + std::uint64_t(t)));
    Matrix synth(Eigen::Index(total * n), feats.cols());
    std::vector<int> labels;
    labels.reserve(total * n);
    for (std::size_t c = 0; c < total; ++c) {
      const auto it = learner.mogs.find(int(c));
      if (it == learner.mogs.end()) throw ValidationError("no mixture stored for class " + std::to_string(c));
      synth.middleRows(Eigen::Index(c * n), Eigen::Index(n)) = it->second.sample(n, rng);
      labels.insert(labels.end(), n, int(c));
    }
    std::vector<int> heads;
    for (int h = cfg.align_all_heads ? 1 : t; h <= t; ++h) heads.push_back(h);
    ProbeOptions align;
    align.epochs = cfg.align_epochs;
    align.lr = cfg.align_lr;
    align.batch_size = cfg.batch_size;
    align.seed = mix_seed(cfg.seed, 7000 + std::uint64_t(t));
    theta = fit_heads(net, theta, synth, labels, {0, total}, heads, align);
  }
  report.aligned_accuracy = local_accuracy(net.head_logits(theta, feats), task.train.labels, task.range);

  const FisherDiagonal local = local_fisher(net, theta, task.train, task.range);
  learner.fisher = accumulate(learner.fisher, local, task.train.size(), cfg.fisher_mode);
  learner.pool.set_theta0(std::move(theta));
  return report;
}

}  // namespace

PreConsolidation pre_consolidate(Learner& learner, const TaskData& task, const TrainConfig& cfg) {
  if (std::size_t(learner.theta0().layout().num_heads()) != learner.pool.count())
    throw ValidationError("every head must have a pooled task vector before the next task");
  return consolidate(learner, task, cfg);
}

RiskSample measure_risk(const Learner& learner, const TaskStream& stream, std::size_t t) {
  if (t == 0 || t > stream.num_tasks()) throw ValidationError("risk requested for an unknown task");
  std::vector<const Batch*> parts;
  for (std::size_t s = 0; s < t; ++s)
    if (!stream.tasks[s].val.empty()) parts.push_back(&stream.tasks[s].val);
  if (parts.empty())
    for (std::size_t s = 0; s < t; ++s) parts.push_back(&stream.tasks[s].train);
  const Batch val = concat(parts);

  const Network& net = learner.net;
  const Pool& pool = learner.pool;
  const ParamVector& theta0 = pool.theta0();
  const auto weights = pool.weights();

  RiskSample r;
  r.after_task = t;
  r.composed = global_nll(net, pool.compose(), val);
  r.theta0 = global_nll(net, theta0, val);

  const LossGrad at0 = net.loss_and_grad(theta0, val, {0, theta0.layout().num_classes()});
  const FisherDiagonal fisher =
      learner.fisher.empty() ? FisherDiagonal(theta0.layout()) : learner.fisher.extended_to(theta0.layout());
  const auto q = QuadraticProxy::diagonal(at0.loss, to_eigen(at0.grad), to_eigen(fisher.values()));

  std::vector<Vector> taus;
  for (int id = 1; id <= int(pool.count()); ++id) {
    const ParamVector d = pool.displacement(id);
    r.individual_mean += weights[std::size_t(id - 1)] * global_nll(net, theta0 + d, val);
    taus.push_back(to_eigen(d));
    r.proxy_individual_mean += weights[std::size_t(id - 1)] * q.eval(taus.back());
  }
  r.proxy_composed = taus.empty() ? q.loss0() : q.eval(combine(taus, weights));
  if (taus.empty()) r.individual_mean = r.composed;
  return r;
}

namespace {

// Composed-model accuracy on every seen task and the risk samples after task t.
void record_task(const Learner& learner, const TaskStream& stream, std::size_t t, RunResult& result) {
  const ParamVector composed = learner.pool.compose();
  for (std::size_t s = 0; s < t; ++s) {
    const Batch& test = stream.tasks[s].test;
    result.acc.set(t - 1, s, accuracy(learner.net.forward(composed, test.inputs), test.labels));
  }
  result.risk.push_back(measure_risk(learner, stream, t));
}

struct Snapshot {
  ParamVector theta0;
  FisherDiagonal fisher;
};

// All pre-consolidations first, then every fine-tune at once against its own
// snapshot, then the pool is replayed in task order.
void run_parallel(Learner& learner, const TaskStream& stream, const TrainConfig& cfg, const TaskHook& hook,
                  RunResult& result) {
  const std::size_t T = stream.num_tasks();
  const ParamVector start = learner.theta0();
  std::vector<Snapshot> snaps;
  for (const auto& task : stream.tasks) {
    TaskLog log;
    log.pre = consolidate(learner, task, cfg);
    result.tasks.push_back(std::move(log));
    snaps.push_back({learner.theta0(), learner.fisher});
  }

  const Pool empty(start);
  std::vector<TaskFit> fits(T);
  const std::size_t workers = cfg.threads ? cfg.threads : std::max(1u, std::thread::hardware_concurrency());
  detail::parallel_for(T, workers, [&](std::size_t i) {
    const TaskData& task = stream.tasks[i];
    fits[i] = fine_tune(learner.net, snaps[i].theta0, snaps[i].fisher, empty, i + 1, task.train, task.range, cfg,
                        false);
  });

  learner.pool = Pool(start);
  for (std::size_t t = 1; t <= T; ++t) {
    learner.pool.set_theta0(std::move(snaps[t - 1].theta0));
    learner.fisher = std::move(snaps[t - 1].fisher);
    TaskLog& log = result.tasks[t - 1];
    log.epoch_loss = std::move(fits[t - 1].epoch_loss);
    log.ewc = fits[t - 1].ewc;
    log.seconds = fits[t - 1].seconds;
    learner.pool.add(std::move(fits[t - 1].tau));
    record_task(learner, stream, t, result);
    if (hook) hook(learner, t, stream);
  }
}

}  // namespace

RunOutput run_sequence(const TaskStream& stream, const Network& net, const ParamVector& theta0,
                       const TrainConfig& cfg, const TaskHook& hook) {
  cfg.validate();
  stream.validate();
  if (theta0.layout().num_heads() != 0) throw ValidationError("run_sequence expects a head-less theta0");
  if (stream.input_dim != net.spec().input_dim)
    throw LayoutError("dataset width " + std::to_string(stream.input_dim) + " does not match the network input " +
                      std::to_string(net.spec().input_dim));

  Learner learner(net, theta0);
  std::vector<std::size_t> sizes;
  for (const auto& task : stream.tasks) {
    if (task.test.empty()) throw ValidationError("every task needs a non-empty test split");
    sizes.push_back(task.test.size());
  }
  RunResult result;
  result.acc = AccMatrix(stream.num_tasks(), sizes);

  if (cfg.parallel_tasks) {
    run_parallel(learner, stream, cfg, hook, result);
  } else {
    for (std::size_t t = 1; t <= stream.num_tasks(); ++t) {
      const TaskData& task = stream.tasks[t - 1];
      TaskLog log;
      log.pre = pre_consolidate(learner, task, cfg);
      TaskFit fit = cfg.algo == Algo::IEL ? train_task_iel(learner, task.train, task.range, cfg)
                                          : train_task_ita(learner, task.train, task.range, cfg);
      log.epoch_loss = std::move(fit.epoch_loss);
      log.ewc = fit.ewc;
      log.seconds = fit.seconds;
      learner.pool.add(std::move(fit.tau));
      result.tasks.push_back(std::move(log));
      record_task(learner, stream, t, result);
      if (hook) hook(learner, t, stream);
    }
  }
  result.fa = final_accuracy(result.acc);
  result.ff = final_forgetting(result.acc);
  return RunOutput{std::move(learner), std::move(result)};
}

}  // namespace taskvec
