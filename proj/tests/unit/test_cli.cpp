#include <doctest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "helpers.hpp"
#include "taskvec/io.hpp"
#include "taskvec_cli/cli.hpp"

using namespace taskvec;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("taskvec-cli-" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

json preset(const std::string& name) {
  std::ifstream in(fs::path(TASKVEC_CONFIG_DIR) / name);
  return json::parse(in);
}

// The default preset on a smaller stream so the tests stay quick.
json small_config(json cfg) {
  cfg["dataset"]["params"]["tasks"] = 3;
  cfg["dataset"]["params"]["samples_per_class"] = 80;
  cfg["train"]["epochs"] = 4;
  cfg.erase("edits");
  return cfg;
}

fs::path write_json(const fs::path& p, const json& j) {
  std::ofstream(p) << j.dump(2);
  return p;
}

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("presets parse") {
  for (const char* name : {"ita-default.json", "iel-default.json", "finetune-default.json", "ita-lora.json"}) {
    CAPTURE(name);
    const auto rc = cli::parse_run_config(preset(name));
    CHECK(rc.dataset.at("kind") == "blobs");
    CHECK_NOTHROW(rc.train.validate());
  }
  const auto rc = cli::parse_run_config(preset("ita-default.json"));
  CHECK(rc.train.algo == Algo::ITA);
  CHECK(rc.train.reg.alpha == 10.0);
  CHECK(rc.edits.size() == 2);
  CHECK(cli::parse_run_config(preset("iel-default.json")).train.algo == Algo::IEL);
}

TEST_CASE("config schema is strict") {
  const json base = preset("ita-default.json");
  auto with = [&](auto mutate) {
    json j = base;
    mutate(j);
    return j;
  };
  CHECK_THROWS_AS(cli::parse_run_config(with([](json& j) { j["train"]["lrr"] = 1.0; })), cli::SchemaError);
  CHECK_THROWS_AS(cli::parse_run_config(with([](json& j) { j["extra"] = 1; })), cli::SchemaError);
  CHECK_THROWS_AS(cli::parse_run_config(with([](json& j) { j.erase("dataset"); })), cli::SchemaError);
  CHECK_THROWS_AS(cli::parse_run_config(with([](json& j) { j["train"]["epochs"] = "ten"; })), cli::SchemaError);
  CHECK_THROWS_AS(cli::parse_run_config(with([](json& j) { j["train"]["algo"] = "SGD"; })), Error);
  CHECK_THROWS_AS(cli::parse_run_config(with([](json& j) { j["dataset"]["kind"] = "parquet"; })),
                  cli::SchemaError);
  CHECK_THROWS_AS(cli::parse_run_config(with([](json& j) { j["edits"] = json::array({json::object()}); })),
                  cli::SchemaError);
  CHECK_THROWS_AS(
      cli::parse_run_config(with([](json& j) { j["edits"] = json::array({{{"unlearn", 1}, {"specialize", {1}}}}); })),
      cli::SchemaError);

  const auto rc = cli::parse_run_config(
      with([](json& j) { j["dataset"] = {{"kind", "csv"}, {"params", {{"path", "data/x.csv"}}}}; }), "/base");
  CHECK(fs::path(rc.dataset["params"]["path"].get<std::string>()) == fs::path("/base/data/x.csv"));
}

TEST_CASE("train, eval and edit round trip") {
  const auto dir = scratch_dir("train");
  json cfg = small_config(preset("ita-default.json"));
  cfg["edits"] = json::array({{{"unlearn", 2}}, {{"specialize", {1, 2, 3}}}});
  const auto cfg_path = write_json(dir / "run.json", cfg);

  const auto tr = run({"train", "--config", cfg_path.string(), "--out", (dir / "out").string()});
  REQUIRE(tr.code == 0);
  const json summary = json::parse(tr.out);
  for (const char* f : {"pool.json", "pool.bin", "dataset.json", "metrics.csv", "result.json", "train.log",
                        "unlearn-2.json", "unlearn-2.bin", "specialize-1-2-3.json"})
    CHECK(fs::exists(dir / "out" / f));
  const json result = json::parse(slurp(dir / "out" / "result.json"));
  CHECK(result.at("fa") == summary.at("fa"));
  CHECK(result.at("risk_proxy") == "diagonal-fisher");
  CHECK(result.at("acc").size() == 3);
  CHECK(result.at("acc")[0][1].is_null());
  const double fa = result.at("fa");
  CHECK(fa > 0.5);

  const auto ev = run({"eval", "--pool", (dir / "out" / "pool.json").string(), "--dataset", cfg_path.string()});
  REQUIRE(ev.code == 0);
  const json evj = json::parse(ev.out);
  CHECK(std::abs(evj.at("overall").get<double>() - fa) <= 1e-12);
  CHECK(evj.at("vectors") == 3);
  CHECK(evj.at("per_task").size() == 3);

  // Rerunning gives identical metrics.
  const auto again = run({"train", "--config", cfg_path.string(), "--out", (dir / "again").string()});
  REQUIRE(again.code == 0);
  CHECK(slurp(dir / "out" / "metrics.csv") == slurp(dir / "again" / "metrics.csv"));

  // Specialising to every task reproduces the composed model.
  const auto& edits = result.at("edits");
  REQUIRE(edits.size() == 2);
  CHECK(edits[1].at("fa_tgt").get<double>() == edits[1].at("unedited_fa_tgt").get<double>());
  CHECK(edits[1].at("fa_ctrl").is_null());

  const auto ed = run({"edit", "--pool", (dir / "out" / "pool.json").string(), "--unlearn", "1", "--mode",
                       "subtract", "--eval", cfg_path.string(), "--out", (dir / "sub.json").string()});
  REQUIRE(ed.code == 0);
  const json edj = json::parse(ed.out);
  CHECK(edj.at("targets") == json::array({1}));
  CHECK(fs::exists(dir / "sub.json"));
  const auto [weights, spec] = load_params(dir / "sub.json");
  const PoolFile pf = load_pool(dir / "out" / "pool.json");
  CHECK(th::bitwise_equal(weights.values(), pf.pool.unlearn(1, UnlearnMode::Subtract).values()));

  CHECK(run({"edit", "--pool", (dir / "out" / "pool.json").string(), "--unlearn", "9"}).code == cli::kUsage);
  CHECK(run({"edit", "--pool", (dir / "out" / "pool.json").string(), "--specialize", "1,x"}).code == cli::kUsage);
}

TEST_CASE("default presets: anchor beats plain fine-tuning and edits move the right way") {
  const auto dir = scratch_dir("presets");
  const auto ita = run({"train", "--config", (fs::path(TASKVEC_CONFIG_DIR) / "ita-default.json").string(), "--out",
                        (dir / "ita").string()});
  const auto ft = run({"train", "--config", (fs::path(TASKVEC_CONFIG_DIR) / "finetune-default.json").string(),
                       "--out", (dir / "ft").string()});
  REQUIRE(ita.code == 0);
  REQUIRE(ft.code == 0);
  CHECK(json::parse(ita.out).at("fa").get<double>() > json::parse(ft.out).at("fa").get<double>());

  const json result = json::parse(slurp(dir / "ita" / "result.json"));
  for (const auto& e : result.at("edits")) {
    CAPTURE(e.at("edit").get<std::string>());
    const double edited = e.at("fa_tgt"), unedited = e.at("unedited_fa_tgt");
    if (e.at("edit") == "unlearn-1") CHECK(edited <= unedited);
    if (e.at("edit") == "specialize-1") CHECK(edited >= unedited);
  }
}

TEST_CASE("a pool without task vectors scores its probes") {
  const auto dir = scratch_dir("theta0");
  const json cfg = small_config(preset("ita-default.json"));
  const auto cfg_path = write_json(dir / "run.json", cfg);
  REQUIRE(run({"train", "--config", cfg_path.string(), "--out", (dir / "out").string()}).code == 0);

  PoolFile pf = load_pool(dir / "out" / "pool.json");
  const ParamVector theta0 = pf.pool.theta0();
  pf.pool = Pool(theta0);
  save_pool(dir / "bare.json", pf);
  const auto ev = run({"eval", "--pool", (dir / "bare.json").string(), "--dataset", cfg_path.string()});
  REQUIRE(ev.code == 0);
  const double bare = json::parse(ev.out).at("overall");

  // Independent baseline: one softmax probe over every class on the frozen
  // backbone of theta0, trained from zero heads on all training rows.
  const TaskStream stream = cli::load_dataset(cli::parse_run_config(cfg).dataset);
  const Network net(pf.net);
  std::vector<const Batch*> parts, tests;
  for (const auto& t : stream.tasks) {
    parts.push_back(&t.train);
    tests.push_back(&t.test);
  }
  const Batch all = concat(parts);
  const Batch test = concat(tests);
  ParamVector zeroed = theta0;
  for (std::size_t e = 0; e < zeroed.layout().num_entries(); ++e)
    if (zeroed.layout().entry(e).is_head())
      for (auto& v : zeroed.entry(e)) v = 0.0;
  ProbeOptions po;
  po.epochs = 20;
  po.lr = 0.05;
  const ParamVector probe = fit_heads(net, zeroed, net.features(zeroed, all.inputs), all.labels,
                                     {0, stream.total_classes}, {1, 2, 3}, po);
  const double baseline = accuracy(net.forward(probe, test.inputs), test.labels);
  MESSAGE("theta0-only accuracy " << bare << ", joint probe " << baseline);
  CHECK(bare >= baseline - 0.1);
  CHECK(bare <= 1.0);
}

TEST_CASE("input errors map to exit codes") {
  const auto dir = scratch_dir("errors");
  CHECK(run({}).code == cli::kUsage);
  CHECK(run({"frobnicate"}).code == cli::kUsage);
  CHECK(run({"--help"}).code == cli::kOk);
  CHECK(run({"train", "--config", (dir / "missing.json").string(), "--out", dir.string()}).code == cli::kUsage);
  CHECK(run({"eval", "--pool", (dir / "missing.json").string(), "--dataset", "x"}).code == cli::kUsage);
  CHECK(run({"verify", "--suite", "nope"}).code == cli::kUsage);

  json bad = preset("ita-default.json");
  bad["train"]["unknown"] = 1;
  const auto r = run({"train", "--config", write_json(dir / "bad.json", bad).string(), "--out", dir.string()});
  CHECK(r.code == cli::kUsage);
  CHECK(r.err.find("unknown") != std::string::npos);

  // A pool trained on 16 inputs cannot score 8-wide data.
  const json cfg = small_config(preset("ita-default.json"));
  const auto cfg_path = write_json(dir / "run.json", cfg);
  REQUIRE(run({"train", "--config", cfg_path.string(), "--out", (dir / "out").string()}).code == 0);
  json narrow = cfg;
  narrow["dataset"]["params"]["dim"] = 8;
  const auto narrow_path = write_json(dir / "narrow.json", narrow);
  CHECK(run({"eval", "--pool", (dir / "out" / "pool.json").string(), "--dataset", narrow_path.string()}).code ==
        cli::kUsage);
}

TEST_CASE("verify command") {
  const auto dir = scratch_dir("verify");
  const auto r = run({"verify", "--suite", "decomposition", "--instances", "5", "--json", (dir / "v.json").string()});
  CHECK(r.code == cli::kOk);
  CHECK(r.out.find("PASS decomposition") != std::string::npos);
  const json j = json::parse(slurp(dir / "v.json"));
  CHECK(j.is_array());
  for (const char* name : {"decomposition", "gradients", "o1"}) {
    CAPTURE(name);
    const auto v = run({"verify", "--suite", name, "--quiet"});
    CHECK(v.code == cli::kOk);
    CHECK(v.out.find("FAIL") == std::string::npos);
  }
  const auto q = run({"verify", "--suite", "masking", "--quiet"});
  CHECK(q.code == cli::kOk);
  // One summary line per check and nothing else.
  CHECK(std::count(q.out.begin(), q.out.end(), '\n') == 2);
  CHECK(q.out.rfind("PASS masking", 0) == 0);
}

TEST_CASE("thread budget honours the environment") {
  setenv("TASKVEC_THREADS", "3", 1);
  CHECK(cli::thread_budget() == 3);
  unsetenv("TASKVEC_THREADS");
  CHECK(cli::thread_budget() >= 1);
}
