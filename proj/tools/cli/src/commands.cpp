#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "taskvec/errors.hpp"
#include "taskvec/io.hpp"
#include "taskvec/verify.hpp"
#include "taskvec_cli/cli.hpp"

namespace taskvec::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json nan_to_null(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write '" + path.string() + "'");
  f << text;
}

json accuracies_json(const std::vector<TaskAccuracy>& acc) {
  json out = json::array();
  for (const auto& a : acc) out.push_back({{"task", a.task}, {"samples", a.samples}, {"accuracy", a.accuracy}});
  return out;
}

double mean_over(const std::vector<TaskAccuracy>& acc, const std::vector<int>& ids, bool inside) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& a : acc) {
    const bool in = std::find(ids.begin(), ids.end(), int(a.task)) != ids.end();
    if (in == inside) {
      sum += a.accuracy;
      ++n;
    }
  }
  return n ? sum / double(n) : std::numeric_limits<double>::quiet_NaN();
}

void check_compatible(const Network& net, const Pool& pool, const TaskStream& stream) {
  if (stream.input_dim != net.spec().input_dim)
    throw LayoutError("dataset has " + std::to_string(stream.input_dim) + " features but the pool's network expects " +
                      std::to_string(net.spec().input_dim));
  if (stream.total_classes != pool.theta0().layout().num_classes())
    throw LayoutError("dataset has " + std::to_string(stream.total_classes) + " classes but the pool's heads cover " +
                      std::to_string(pool.theta0().layout().num_classes()));
}

std::vector<int> parse_ids(const std::string& text) {
  std::vector<int> ids;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const int id = std::stoi(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      ids.push_back(id);
    } catch (const std::logic_error&) {
      throw SchemaError("task ids must be comma-separated integers (got '" + text + "')");
    }
  }
  if (ids.empty()) throw SchemaError("at least one task id is required");
  return ids;
}

std::string edit_name(const EditSpec& e) {
  if (!e.specialize.empty()) {
    std::string s = "specialize";
    for (int id : e.specialize) s += "-" + std::to_string(id);
    return s;
  }
  return "unlearn-" + std::to_string(e.unlearn);
}

int cmd_train(const std::string& config, const std::string& out_flag, std::ostream& out) {
  RunConfigFile rc = load_run_config(config);
  if (rc.train.threads == 0) rc.train.threads = thread_budget();
  fs::path dir;
  if (!out_flag.empty()) dir = out_flag;
  else if (rc.output) dir = *rc.output;
  else throw SchemaError("no output directory: pass --out or set \"output\" in the config");

  const TaskStream stream = load_dataset(rc.dataset);
  NetSpec ns;
  ns.input_dim = stream.input_dim;
  ns.hidden = rc.net.hidden;
  ns.activation = rc.net.activation;
  const Network net(ns);
  const ParamVector theta0 = net.init(rc.net.init_seed.value_or(rc.train.seed + 1), rc.net.weight_scale);
  const RunOutput run = run_sequence(stream, net, theta0, rc.train);
  const RunResult& r = run.result;

  fs::create_directories(dir);
  PoolFile pf{run.learner.net.spec(), run.learner.pool, run.learner.fisher, json::object()};
  pf.metadata = {{"train", to_json(rc.train)}, {"dataset", rc.dataset}};
  save_pool(dir / "pool.json", pf);
  write_text(dir / "dataset.json", rc.dataset.dump(2) + "\n");

  std::string csv = "after_task,eval_task,accuracy\n";
  for (std::size_t k = 0; k < r.acc.tasks(); ++k)
    for (std::size_t t = 0; t <= k; ++t)
      csv += std::to_string(k + 1) + "," + std::to_string(t + 1) + "," + fmt(r.acc.at(k, t)) + "\n";
  write_text(dir / "metrics.csv", csv);

  json result;
  result["fa"] = r.fa;
  result["ff"] = r.ff;
  json acc = json::array();
  for (std::size_t k = 0; k < r.acc.tasks(); ++k) {
    json row = json::array();
    for (std::size_t t = 0; t < r.acc.tasks(); ++t) row.push_back(nan_to_null(r.acc.at(k, t)));
    acc.push_back(row);
  }
  result["acc"] = acc;
  json risk = json::array();
  for (const auto& s : r.risk)
    risk.push_back({{"after_task", s.after_task},
                    {"composed", s.composed},
                    {"individual_mean", s.individual_mean},
                    {"theta0", s.theta0},
                    {"proxy_composed", s.proxy_composed},
                    {"proxy_individual_mean", s.proxy_individual_mean}});
  result["risk"] = risk;
  result["risk_proxy"] = "diagonal-fisher";
  json tasks = json::array();
  for (std::size_t k = 0; k < r.tasks.size(); ++k) {
    const auto& log = r.tasks[k];
    tasks.push_back({{"task", k + 1},
                     {"probe_accuracy", log.pre.probe_accuracy},
                     {"aligned_accuracy", log.pre.aligned_accuracy},
                     {"mog_components", log.pre.mog_components},
                     {"epoch_loss", log.epoch_loss},
                     {"ewc", log.ewc}});
  }
  result["tasks"] = tasks;
  result["config"] = to_json(rc.train);

  std::ostringstream log;
  for (std::size_t k = 0; k < r.tasks.size(); ++k) {
    const auto& t = r.tasks[k];
    log << "task " << k + 1 << ": probe_acc=" << t.pre.probe_accuracy << " aligned_acc=" << t.pre.aligned_accuracy
        << " final_loss=" << (t.epoch_loss.empty() ? 0.0 : t.epoch_loss.back()) << " ewc=" << t.ewc
        << " fit_seconds=" << t.seconds << "\n  acc:";
    for (std::size_t s = 0; s <= k; ++s) log << " " << r.acc.at(k, s);
    log << "\n  risk: composed=" << r.risk[k].composed << " individual_mean=" << r.risk[k].individual_mean << "\n";
  }
  log << "fa=" << r.fa << " ff=" << r.ff << "\n";

  if (!rc.edits.empty()) {
    json edits = json::array();
    for (const auto& e : rc.edits) {
      const EditReport rep = edit_report(run.learner.net, run.learner.pool, e, stream);
      save_params(dir / (edit_name(e) + ".json"), apply_edit(run.learner.pool, e), run.learner.net.spec());
      json j = to_json(rep);
      j["edit"] = edit_name(e);
      edits.push_back(j);
      log << edit_name(e) << ": fa_tgt=" << rep.fa_tgt << " (unedited " << rep.unedited_fa_tgt << ")\n";
    }
    result["edits"] = edits;
  }
  write_text(dir / "result.json", result.dump(2) + "\n");
  write_text(dir / "train.log", log.str());
  out << json{{"fa", r.fa}, {"ff", r.ff}, {"output", dir.string()}}.dump() << "\n";
  return kOk;
}

int cmd_edit(const std::string& pool_path, const std::string& specialize, int unlearn, const std::string& mode,
             const std::string& eval, const std::string& out_flag, std::ostream& out) {
  const PoolFile pf = load_pool(pool_path);
  const Network net(pf.net);
  EditSpec e;
  if (!specialize.empty()) e.specialize = parse_ids(specialize);
  else e.unlearn = unlearn;
  if (mode == "subtract") e.mode = UnlearnMode::Subtract;
  else if (mode != "renormalize") throw SchemaError("--mode must be renormalize or subtract");

  const ParamVector edited = apply_edit(pf.pool, e);
  const fs::path target = out_flag.empty() ? fs::path(pool_path).parent_path() / (edit_name(e) + ".json") : fs::path(out_flag);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  save_params(target, edited, pf.net);

  json report = {{"edit", edit_name(e)}, {"weights", target.string()}};
  if (!eval.empty()) {
    const TaskStream stream = load_dataset(load_dataset_file(eval));
    check_compatible(net, pf.pool, stream);
    report.update(to_json(edit_report(net, pf.pool, e, stream)));
  }
  out << report.dump(2) << "\n";
  return kOk;
}

int cmd_eval(const std::string& pool_path, const std::string& dataset, std::ostream& out) {
  const PoolFile pf = load_pool(pool_path);
  const Network net(pf.net);
  const TaskStream stream = load_dataset(load_dataset_file(dataset));
  check_compatible(net, pf.pool, stream);
  const auto acc = evaluate(net, pf.pool.compose(), stream);
  out << json{{"per_task", accuracies_json(acc)}, {"overall", overall_accuracy(acc)}, {"vectors", pf.pool.count()}}.dump(2)
      << "\n";
  return kOk;
}

int cmd_verify(const std::string& suite, std::uint64_t seed, std::size_t instances, const std::string& json_out,
               bool quiet, std::ostream& out, std::ostream& err) {
  verify::Options opts;
  opts.seed = seed;
  opts.instances = instances;
  opts.threads = thread_budget();
  const auto reports = verify::run_suite(suite, opts);
  bool ok = true;
  json all = json::array();
  for (const auto& r : reports) {
    ok = ok && r.pass;
    out << (r.pass ? "PASS " : "FAIL ") << r.check << " instances=" << r.instances << " max_residual=" << r.max_residual
        << " tolerance=" << r.tolerance << " worst_seed=" << r.worst_seed << "\n";
    if (!quiet)
      for (const auto& [s, res] : r.samples) out << "  seed=" << s << " residual=" << res << "\n";
    if (!r.pass) err << "verification failed: " << r.check << " worst instance seed " << r.worst_seed << "\n";
    all.push_back(r.to_json());
  }
  if (!json_out.empty()) write_text(json_out, all.dump(2) + "\n");
  return ok ? kOk : kVerifyFailed;
}

}  // namespace

std::vector<TaskAccuracy> evaluate(const Network& net, const ParamVector& theta, const TaskStream& stream) {
  std::vector<TaskAccuracy> out;
  for (std::size_t t = 0; t < stream.num_tasks(); ++t) {
    const Batch& test = stream.tasks[t].test;
    out.push_back({t + 1, test.size(), accuracy(net.forward(theta, test.inputs), test.labels)});
  }
  return out;
}

double overall_accuracy(const std::vector<TaskAccuracy>& per_task) {
  if (per_task.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::vector<std::size_t> sizes;
  for (const auto& a : per_task) sizes.push_back(a.samples);
  AccMatrix m(per_task.size(), sizes);
  for (std::size_t t = 0; t < per_task.size(); ++t) m.set(per_task.size() - 1, t, per_task[t].accuracy);
  return final_accuracy(m);
}

ParamVector apply_edit(const Pool& pool, const EditSpec& edit) {
  const auto check = [&](int id) {
    if (id < 1 || std::size_t(id) > pool.count())
      throw SchemaError("unknown task id " + std::to_string(id) + " (pool holds " + std::to_string(pool.count()) +
                        " task vectors)");
  };
  if (!edit.specialize.empty()) {
    for (int id : edit.specialize) check(id);
    return pool.specialize(edit.specialize);
  }
  check(edit.unlearn);
  return pool.unlearn(edit.unlearn, edit.mode);
}

EditReport edit_report(const Network& net, const Pool& pool, const EditSpec& edit, const TaskStream& stream) {
  EditReport r;
  r.targets = edit.specialize.empty() ? std::vector<int>{edit.unlearn} : edit.specialize;
  r.edited = evaluate(net, apply_edit(pool, edit), stream);
  r.unedited = evaluate(net, pool.compose(), stream);
  r.fa_tgt = mean_over(r.edited, r.targets, true);
  r.unedited_fa_tgt = mean_over(r.unedited, r.targets, true);
  const double ctrl = mean_over(r.edited, r.targets, false);
  if (std::isfinite(ctrl)) {
    r.fa_ctrl = ctrl;
    r.unedited_fa_ctrl = mean_over(r.unedited, r.targets, false);
  }
  return r;
}

json to_json(const EditReport& r) {
  return {{"targets", r.targets},
          {"fa_tgt", r.fa_tgt},
          {"fa_ctrl", r.fa_ctrl ? json(*r.fa_ctrl) : json(nullptr)},
          {"unedited_fa_tgt", r.unedited_fa_tgt},
          {"unedited_fa_ctrl", r.unedited_fa_ctrl ? json(*r.unedited_fa_ctrl) : json(nullptr)},
          {"per_task", accuracies_json(r.edited)},
          {"unedited_per_task", accuracies_json(r.unedited)}};
}

std::size_t thread_budget() {
  std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("TASKVEC_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return std::size_t(v);
  }
  return hw;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Incremental learning with composable task vectors"};
  app.require_subcommand(1);

  std::string config, out_dir;
  auto* train = app.add_subcommand("train", "Run a sequence of tasks from a JSON config");
  train->add_option("--config", config, "Run config (JSON)")->required();
  train->add_option("--out", out_dir, "Output directory (overrides the config)");

  std::string pool, specialize, mode = "renormalize", eval, edit_out;
  int unlearn = 0;
  auto* edit = app.add_subcommand("edit", "Specialise or unlearn on a saved pool");
  edit->add_option("--pool", pool, "Pool manifest")->required();
  auto* spec_opt = edit->add_option("--specialize", specialize, "Comma-separated task ids to keep");
  auto* unl_opt = edit->add_option("--unlearn", unlearn, "Task id to remove");
  spec_opt->excludes(unl_opt);
  edit->add_option("--mode", mode, "Unlearning mode: renormalize or subtract");
  edit->add_option("--eval", eval, "Dataset spec (or run config) to evaluate on");
  edit->add_option("--out", edit_out, "Where to write the edited weights");

  std::string suite = "all", report;
  std::uint64_t seed = 0;
  std::size_t instances = 100;
  bool quiet = false;
  auto* ver = app.add_subcommand("verify", "Run numerical property suites");
  ver->add_option("--suite", suite, "Suite name or 'all'");
  ver->add_option("--seed", seed, "Base seed");
  ver->add_option("--instances", instances, "Random instances per check");
  ver->add_option("--json", report, "Write the full report as JSON");
  ver->add_flag("--quiet", quiet, "Only print one line per check");

  std::string eval_pool, dataset;
  auto* ev = app.add_subcommand("eval", "Evaluate a pool's composed model");
  ev->add_option("--pool", eval_pool, "Pool manifest")->required();
  ev->add_option("--dataset", dataset, "Dataset spec (or run config)")->required();

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
    if (edit->parsed() && specialize.empty() && unl_opt->count() == 0)
      throw SchemaError("edit needs --specialize IDS or --unlearn ID");
    if (train->parsed()) return cmd_train(config, out_dir, out);
    if (edit->parsed()) return cmd_edit(pool, specialize, unlearn, mode, eval, edit_out, out);
    if (ver->parsed()) return cmd_verify(suite, seed, instances, report, quiet, out, err);
    return cmd_eval(eval_pool, dataset, out);
  } catch (const CLI::Success&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const json::exception& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }
}

}  // namespace taskvec::cli
