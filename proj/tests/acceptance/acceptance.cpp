// End-to-end acceptance gate: one PASS/FAIL line per criterion.
#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "taskvec/trainers.hpp"
#include "taskvec/verify.hpp"
#include "taskvec_cli/cli.hpp"

using namespace taskvec;
namespace fs = std::filesystem;

namespace {

// Baseline of the default blob benchmark (seed 0), frozen from the first run.
// Regression thresholds sit a little below the observed margins.
constexpr double kItaFaFloor = 0.90;          // observed 0.9425
constexpr double kAblationGapFloor = 0.10;    // required; observed gap recorded in the log line
constexpr double kFinetuneFfFloor = 0.30;     // observed 0.4356
constexpr double kFinetuneGapFloor = 0.20;    // observed ITA - FINETUNE = 0.4965
// Relative growth of cached per-task fit time across T = 1..10 that still
// counts as flat: fitted slope * (T - 1) / mean time.
constexpr double kFlatGrowth = 0.25;

struct Outcome {
  bool pass = true;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Outcome from_reports(const std::vector<VerificationReport>& reports, const std::vector<std::string>& checks) {
  Outcome o;
  for (const auto& name : checks) {
    const auto it = std::find_if(reports.begin(), reports.end(), [&](const auto& r) { return r.check == name; });
    if (it == reports.end()) {
      o.pass = false;
      o.detail += name + "=missing ";
      continue;
    }
    o.pass = o.pass && it->pass;
    o.detail += name + " n=" + std::to_string(it->instances) + " max=" + fmt("%.3g", it->max_residual) +
                " tol=" + fmt("%.3g", it->tolerance) + " ";
  }
  return o;
}

Outcome suite(const std::string& name, const std::vector<std::string>& checks) {
  verify::Options o;
  o.instances = 100;
  return from_reports(verify::run_suite(name, o), checks);
}

struct Preset {
  cli::RunConfigFile rc;
  TaskStream stream;
  Network net;
  ParamVector theta0;
};

Preset load_preset(const std::string& file) {
  auto rc = cli::load_run_config(fs::path(TASKVEC_CONFIG_DIR) / file);
  TaskStream stream = cli::load_dataset(rc.dataset);
  NetSpec ns;
  ns.input_dim = stream.input_dim;
  ns.hidden = rc.net.hidden;
  ns.activation = rc.net.activation;
  Network net(ns);
  ParamVector theta0 = net.init(rc.net.init_seed.value_or(rc.train.seed + 1), rc.net.weight_scale);
  return {std::move(rc), std::move(stream), std::move(net), std::move(theta0)};
}

const Preset& ita_preset() {
  static const Preset p = load_preset("ita-default.json");
  return p;
}

const RunOutput& ita_run() {
  static const RunOutput out = [] {
    const auto& p = ita_preset();
    return run_sequence(p.stream, p.net, p.theta0, p.rc.train);
  }();
  return out;
}

Outcome ablation() {
  const auto& p = ita_preset();
  const RunResult& with = ita_run().result;
  TrainConfig off = p.rc.train;
  off.reg.alpha = off.reg.alpha_cls = 0.0;
  const RunResult without = run_sequence(p.stream, p.net, p.theta0, off).result;
  const auto& rw = with.risk.back();
  const auto& ro = without.risk.back();
  Outcome o;
  const double gap = with.fa - without.fa;
  o.pass = gap >= kAblationGapFloor && with.fa >= kItaFaFloor && rw.composed < ro.composed &&
           rw.individual_mean < ro.individual_mean;
  o.detail = "fa " + fmt("%.4f", with.fa) + " vs " + fmt("%.4f", without.fa) + " (gap " + fmt("%.4f", gap) +
             ") risk " + fmt("%.4g", rw.composed) + " vs " + fmt("%.4g", ro.composed) + " bound " +
             fmt("%.4g", rw.individual_mean) + " vs " + fmt("%.4g", ro.individual_mean);
  return o;
}

Outcome editing() {
  const auto& p = ita_preset();
  const Pool& pool = ita_run().learner.pool;
  Outcome o;
  std::string unl = "unlearn", spec = "specialize";
  for (int t = 1; t <= int(pool.count()); ++t) {
    cli::EditSpec u;
    u.unlearn = t;
    const auto ru = cli::edit_report(p.net, pool, u, p.stream);
    cli::EditSpec s;
    s.specialize = {t};
    const auto rs = cli::edit_report(p.net, pool, s, p.stream);
    o.pass = o.pass && ru.fa_tgt < ru.unedited_fa_tgt && rs.fa_tgt >= rs.unedited_fa_tgt;
    unl += " " + fmt("%.4f", ru.fa_tgt) + "<" + fmt("%.4f", ru.unedited_fa_tgt);
    spec += " " + fmt("%.4f", rs.fa_tgt) + ">=" + fmt("%.4f", rs.unedited_fa_tgt);
  }
  o.detail = unl + "; " + spec;
  return o;
}

Outcome forgetting() {
  const Preset p = load_preset("finetune-default.json");
  const RunResult ft = run_sequence(p.stream, p.net, p.theta0, p.rc.train).result;
  const double ita = ita_run().result.fa;
  Outcome o;
  o.pass = ft.ff >= kFinetuneFfFloor && ita - ft.fa >= kFinetuneGapFloor;
  o.detail = "finetune ff " + fmt("%.4f", ft.ff) + " fa " + fmt("%.4f", ft.fa) + " vs ita fa " + fmt("%.4f", ita);
  return o;
}

// Least-squares slope of y against 1..n.
double trend(const std::vector<double>& y) {
  const double n = double(y.size());
  double mx = (n + 1) / 2, my = 0.0;
  for (double v : y) my += v / n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    sxy += (double(i + 1) - mx) * (y[i] - my);
    sxx += (double(i + 1) - mx) * (double(i + 1) - mx);
  }
  return sxy / sxx;
}

// Per-task fit seconds over T = 1..10, minimum of three repeats.
std::vector<double> fit_times(bool cached) {
  BlobOptions b;
  b.tasks = 10;
  b.dim = 32;
  b.samples_per_class = 60;
  b.mean_scale = 1.5;
  const TaskStream stream = gen_blobs(b);
  NetSpec ns;
  ns.input_dim = b.dim;
  ns.hidden = {256, 256};
  const Network net(ns);
  TrainConfig c;
  c.algo = Algo::IEL;
  c.lr = 0.01;
  c.epochs = 3;
  c.pre_epochs = 1;
  c.mog_components = 1;
  c.mog_samples = 8;
  c.align_epochs = 0;
  c.reg.beta = c.reg.beta_cls = 1.0;
  c.cached_base = cached;
  std::vector<double> best(b.tasks, std::numeric_limits<double>::infinity());
  for (int rep = 0; rep < 3; ++rep) {
    const auto out = run_sequence(stream, net, net.init(1), c);
    for (std::size_t t = 0; t < b.tasks; ++t) best[t] = std::min(best[t], out.result.tasks[t].seconds);
  }
  return best;
}

double relative_growth(const std::vector<double>& y) {
  double mean = 0.0;
  for (double v : y) mean += v / double(y.size());
  return trend(y) * double(y.size() - 1) / mean;
}

Outcome constant_cost() {
  Outcome o = suite("o1", {"o1-equality"});
  const auto cached = fit_times(true);
  const auto expl = fit_times(false);
  const double g = relative_growth(cached);
  o.pass = o.pass && g < kFlatGrowth;
  o.detail += "cached growth " + fmt("%.3f", g) + " (t1 " + fmt("%.4f", cached.front()) + "s t10 " +
              fmt("%.4f", cached.back()) + "s) explicit growth " + fmt("%.3f", relative_growth(expl));
  return o;
}

Outcome verify_all() {
  std::ostringstream out, err;
  const int code = cli::run({"verify", "--suite", "all", "--quiet"}, out, err);
  std::size_t lines = 0, passed = 0;
  std::istringstream in(out.str());
  for (std::string line; std::getline(in, line); ++lines) passed += line.rfind("PASS", 0) == 0;
  return {code == 0 && lines > 0 && passed == lines,
          "exit " + std::to_string(code) + ", " + std::to_string(passed) + "/" + std::to_string(lines) + " checks"};
}

struct Criterion {
  int id;
  std::string name;
  double budget_seconds;  // 0: no runtime bound
  std::function<Outcome()> run;
};

}  // namespace

int main() {
  const double inf = 0.0;
  const std::vector<Criterion> criteria = {
      {1, "loss decomposition identity", 5.0, [] { return suite("decomposition", {"decomposition"}); }},
      {2, "composition gap is non-negative", 5.0, [] { return suite("jensen", {"jensen", "jensen-omega"}); }},
      {3, "barrier expanded vs pairwise form", inf, [] { return suite("omega-forms", {"omega-forms"}); }},
      {4, "closed-form regulariser gradients", 30.0,
       [] {
         std::vector<std::string> checks;
         for (const char* v : {"FFT", "LoRA-r1", "LoRA-r2", "LoRA-r4", "IA3"})
           for (const char* k : {"ewc", "omega"}) checks.push_back(std::string("gradients-") + k + "-" + v);
         return suite("gradients", checks);
       }},
      {5, "true Fisher diagonal", inf, [] { return suite("fisher", {"fisher-diagonal", "fisher-hessian"}); }},
      {6, "KL matches the Fisher quadratic", inf,
       [] {
         verify::Options opt;
         const auto reports = verify::run_suite("kl", opt);
         Outcome o = from_reports(reports, {"kl-slope", "kl-ratio"});
         for (const auto& r : reports)
           if (r.check == "kl-slope") o.detail += "slope " + fmt("%.3f", r.details.value("slope", 0.0));
         return o;
       }},
      {7, "constant-cost ensemble base", inf, constant_cost},
      {8, "anchor ablation on the blob benchmark", 120.0, ablation},
      {9, "editing signs", inf, editing},
      {10, "fine-tuning forgets", inf, forgetting},
      {11, "every verification suite passes", inf, verify_all},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (c.budget_seconds > 0.0 && secs >= c.budget_seconds) {
      o.pass = false;
      o.detail += " over budget of " + fmt("%.0f", c.budget_seconds) + "s";
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << c.id << " " << c.name << " [" << fmt("%.2f", secs)
              << "s] " << o.detail << std::endl;
  }
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << "\n";
  return failures == 0 ? 0 : 1;
}
