#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string_view>
#include <vector>

#include "taskvec/analysis.hpp"
#include "taskvec/data.hpp"
#include "taskvec/fisher.hpp"
#include "taskvec/mog.hpp"
#include "taskvec/nn.hpp"
#include "taskvec/pool.hpp"
#include "taskvec/regularizers.hpp"
#include "taskvec/task_vector.hpp"

namespace taskvec {

enum class Algo { ITA, IEL, FINETUNE };

std::string_view to_string(Algo algo);
Algo algo_from_string(std::string_view text);

struct TrainConfig {
  Algo algo = Algo::ITA;
  Variant variant = Variant::FFT;
  std::size_t rank = 4;
  double lr = 1e-4;
  std::size_t epochs = 5;
  std::size_t pre_epochs = 3;
  double pre_lr = 1e-2;
  RegConfig reg;
  std::size_t mog_components = 5;
  std::size_t mog_samples = 256;
  std::uint64_t seed = 0;
  std::size_t batch_size = 32;

  std::size_t mog_iterations = 25;
  std::size_t align_epochs = 3;
  double align_lr = 1e-2;
  bool align_all_heads = true;  // false: re-tune only the newest head
  double weight_decay = 0.0;
  AccumulateMode fisher_mode = AccumulateMode::WeightedMean;
  // IEL: read the running sum cached in the pool (true) or rebuild it from the
  // stored vectors on every step (false).
  bool cached_base = true;
  // ITA/FINETUNE only: run every pre-consolidation first, keeping per-task
  // snapshots of theta0 and the Fisher, then fine-tune all tasks
  // concurrently against their snapshots. Results match the sequential run.
  bool parallel_tasks = false;
  std::size_t threads = 0;  // workers for parallel_tasks; 0 = hardware concurrency

  void validate() const;
  static double default_lr(Variant variant) { return variant == Variant::FFT ? 1e-4 : 3e-4; }
};

// Everything carried from one task to the next.
struct Learner {
  Network net;
  FisherDiagonal fisher;
  MogStore mogs;
  Pool pool;

  Learner(Network network, ParamVector theta0);
  const ParamVector& theta0() const { return pool.theta0(); }
  std::size_t classes_seen() const { return theta0().layout().num_classes(); }
};

struct PreConsolidation {
  double probe_accuracy = 0.0;    // local accuracy on the task's training split after probing
  double aligned_accuracy = 0.0;  // same, after classifier alignment
  std::vector<std::size_t> mog_components;  // per class of the task, after clamping
};

// Adds and probes a head for `task`, fits per-class mixtures on frozen
// features, re-tunes heads on sampled features of every class seen so far,
// folds the local Fisher into the global one and makes the result the new
// theta0.
PreConsolidation pre_consolidate(Learner& learner, const TaskData& task, const TrainConfig& cfg);

struct TaskFit {
  TaskVector tau;
  std::vector<double> epoch_loss;  // mean data loss per epoch
  double ewc = 0.0;                // EWC penalty of the final displacement
  double seconds = 0.0;            // fine-tuning wall time
};

// Individual training: minimise local CE at theta0 + tau plus (alpha/2) EWC.
TaskFit train_task_ita(const Learner& learner, const Batch& train, ClassRange range, const TrainConfig& cfg);
// Ensemble training: minimise local CE at theta0^(t) + tau/t plus beta Omega,
// with t = pool.count() + 1.
TaskFit train_task_iel(const Learner& learner, const Batch& train, ClassRange range, const TrainConfig& cfg);

struct RiskSample {
  std::size_t after_task = 0;
  double composed = 0.0;        // l(theta_P)
  double individual_mean = 0.0;  // sum_t w_t l(theta0 + tau_t)
  double theta0 = 0.0;          // l(theta0)
  // Same three on the diagonal-Fisher quadratic proxy built at theta0.
  double proxy_composed = 0.0;
  double proxy_individual_mean = 0.0;
};

struct TaskLog {
  PreConsolidation pre;
  std::vector<double> epoch_loss;
  double ewc = 0.0;
  double seconds = 0.0;
};

struct RunResult {
  AccMatrix acc;
  double fa = 0.0;
  double ff = 0.0;
  std::vector<RiskSample> risk;
  std::vector<TaskLog> tasks;
};

struct RunOutput {
  Learner learner;
  RunResult result;
};

// Called after each task is pooled and evaluated; `t` is 1-based. With
// parallel_tasks the learner's mixtures are already the final ones.
using TaskHook = std::function<void(const Learner&, std::size_t t, const TaskStream&)>;

RunOutput run_sequence(const TaskStream& stream, const Network& net, const ParamVector& theta0,
                       const TrainConfig& cfg, const TaskHook& hook = {});

// Risk samples for a learner over the validation union of the first `t` tasks.
RiskSample measure_risk(const Learner& learner, const TaskStream& stream, std::size_t t);

}  // namespace taskvec
