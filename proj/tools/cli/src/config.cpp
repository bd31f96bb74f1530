#include <fstream>
#include <set>

#include "taskvec/errors.hpp"
#include "taskvec_cli/cli.hpp"

namespace taskvec::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Typed view over one JSON object that remembers which keys were read, so
// leftovers can be reported as unknown.
class Obj {
 public:
  Obj(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw SchemaError(where_ + " must be a JSON object");
  }

  const json* get(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() || it->is_null() ? nullptr : &*it;
  }
  bool has(const std::string& key) { return get(key) != nullptr; }

  void number(const std::string& key, double& out) {
    if (auto* v = get(key)) {
      if (!v->is_number()) fail(key, "a number");
      out = v->get<double>();
    }
  }
  void count(const std::string& key, std::size_t& out) {
    if (auto* v = get(key)) {
      if (!v->is_number_integer() || v->get<long long>() < 0) fail(key, "a non-negative integer");
      out = v->get<std::size_t>();
    }
  }
  void seed(const std::string& key, std::uint64_t& out) {
    if (auto* v = get(key)) {
      if (!v->is_number_integer() || (v->is_number_integer() && !v->is_number_unsigned() && v->get<long long>() < 0))
        fail(key, "a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void integer(const std::string& key, int& out) {
    if (auto* v = get(key)) {
      if (!v->is_number_integer()) fail(key, "an integer");
      out = v->get<int>();
    }
  }
  void flag(const std::string& key, bool& out) {
    if (auto* v = get(key)) {
      if (!v->is_boolean()) fail(key, "a boolean");
      out = v->get<bool>();
    }
  }
  void text(const std::string& key, std::string& out) {
    if (auto* v = get(key)) {
      if (!v->is_string()) fail(key, "a string");
      out = v->get<std::string>();
    }
  }
  std::string required_text(const std::string& key) {
    std::string s;
    if (!has(key)) throw SchemaError(where_ + ": missing required key '" + key + "'");
    text(key, s);
    return s;
  }
  template <class T>
  void list(const std::string& key, std::vector<T>& out) {
    if (auto* v = get(key)) {
      if (!v->is_array()) fail(key, "an array of integers");
      out.clear();
      for (const auto& x : *v) {
        if (!x.is_number_integer() || (std::is_unsigned_v<T> && x.get<long long>() < 0))
          fail(key, "an array of integers");
        out.push_back(x.get<T>());
      }
    }
  }

  std::string where(const std::string& key) const { return where_ + "." + key; }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw SchemaError(where_ + ": unknown key '" + k + "'");
  }

 private:
  [[noreturn]] void fail(const std::string& key, const char* what) const {
    throw SchemaError(where_ + "." + key + " must be " + what);
  }

  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

template <class F>
auto rethrow_as_schema(F&& f) {
  try {
    return f();
  } catch (const SchemaError&) {
    throw;
  } catch (const ValidationError& e) {
    throw SchemaError(e.what());
  }
}

std::string resolve(const std::string& p, const fs::path& base) {
  fs::path path(p);
  if (path.is_relative() && !base.empty()) path = base / path;
  return path.lexically_normal().string();
}

void read_split(Obj& o, json& out) {
  std::size_t tasks = 5;
  std::uint64_t seed = 0;
  std::vector<int> order;
  double test_fraction = 0.2;
  o.count("tasks", tasks);
  o.seed("seed", seed);
  o.list("class_order", order);
  o.number("test_fraction", test_fraction);
  if (tasks == 0) throw SchemaError(o.where("tasks") + " must be at least 1");
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw SchemaError(o.where("test_fraction") + " must lie in (0, 1)");
  out["tasks"] = tasks;
  out["seed"] = seed;
  out["class_order"] = order;
  out["test_fraction"] = test_fraction;
}

SplitOptions split_from(const json& p) {
  SplitOptions s;
  s.tasks = p.at("tasks").get<std::size_t>();
  s.seed = p.at("seed").get<std::uint64_t>();
  s.class_order = p.at("class_order").get<std::vector<int>>();
  s.test_fraction = p.at("test_fraction").get<double>();
  return s;
}

json parse_document(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw SchemaError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

}  // namespace

json parse_dataset_spec(const json& spec, const fs::path& base_dir) {
  Obj o(spec, "dataset");
  const std::string kind = o.required_text("kind");
  json params_in = json::object();
  if (auto* p = o.get("params")) params_in = *p;
  o.finish();
  Obj p(params_in, "dataset.params");
  json params;
  if (kind == "blobs") {
    BlobOptions b;
    p.count("tasks", b.tasks);
    p.count("classes_per_task", b.classes_per_task);
    p.count("dim", b.dim);
    p.count("samples_per_class", b.samples_per_class);
    p.number("spread", b.spread);
    p.number("mean_scale", b.mean_scale);
    p.seed("seed", b.seed);
    if (b.tasks == 0 || b.classes_per_task == 0 || b.dim == 0 || b.samples_per_class < 2)
      throw SchemaError("dataset.params: blob sizes must be positive (samples_per_class >= 2)");
    if (!(b.spread > 0.0) || !(b.mean_scale > 0.0))
      throw SchemaError("dataset.params: spread and mean_scale must be positive");
    params = {{"tasks", b.tasks},
              {"classes_per_task", b.classes_per_task},
              {"dim", b.dim},
              {"samples_per_class", b.samples_per_class},
              {"spread", b.spread},
              {"mean_scale", b.mean_scale},
              {"seed", b.seed}};
  } else if (kind == "idx") {
    params["train_images"] = resolve(p.required_text("train_images"), base_dir);
    params["train_labels"] = resolve(p.required_text("train_labels"), base_dir);
    const bool ti = p.has("test_images"), tl = p.has("test_labels");
    if (ti != tl) throw SchemaError("dataset.params: test_images and test_labels go together");
    if (ti) {
      params["test_images"] = resolve(p.required_text("test_images"), base_dir);
      params["test_labels"] = resolve(p.required_text("test_labels"), base_dir);
    }
    std::size_t max_rows = 0;
    p.count("max_rows", max_rows);
    params["max_rows"] = max_rows;
    read_split(p, params);
  } else if (kind == "csv") {
    params["path"] = resolve(p.required_text("path"), base_dir);
    if (p.has("test")) params["test"] = resolve(p.required_text("test"), base_dir);
    int label_column = -1;
    bool header = false;
    p.integer("label_column", label_column);
    p.flag("header", header);
    params["label_column"] = label_column;
    params["header"] = header;
    read_split(p, params);
  } else {
    throw SchemaError("dataset.kind must be one of blobs, idx, csv (got '" + kind + "')");
  }
  p.finish();
  return {{"kind", kind}, {"params", params}};
}

TaskStream load_dataset(const json& raw) {
  const json spec = parse_dataset_spec(raw, {});
  const json& p = spec["params"];
  const std::string kind = spec["kind"];
  if (kind == "blobs") {
    BlobOptions b;
    b.tasks = p["tasks"];
    b.classes_per_task = p["classes_per_task"];
    b.dim = p["dim"];
    b.samples_per_class = p["samples_per_class"];
    b.spread = p["spread"];
    b.mean_scale = p["mean_scale"];
    b.seed = p["seed"];
    return gen_blobs(b);
  }
  if (kind == "idx") {
    IdxSource train{p["train_images"].get<std::string>(), p["train_labels"].get<std::string>()};
    std::optional<IdxSource> test;
    if (p.contains("test_images"))
      test = IdxSource{p["test_images"].get<std::string>(), p["test_labels"].get<std::string>()};
    return load_idx(train, test, split_from(p), p["max_rows"].get<std::size_t>());
  }
  CsvOptions csv;
  csv.label_column = p["label_column"];
  csv.header = p["header"];
  std::optional<fs::path> test;
  if (p.contains("test")) test = p["test"].get<std::string>();
  return load_csv(p["path"].get<std::string>(), test, csv, split_from(p));
}

json load_dataset_file(const fs::path& path) {
  const json doc = parse_document(path);
  const fs::path base = fs::absolute(path).parent_path();
  if (doc.is_object() && doc.contains("dataset") && !doc.contains("kind"))
    return parse_dataset_spec(doc["dataset"], base);
  return parse_dataset_spec(doc, base);
}

json to_json(const TrainConfig& c) {
  json reg = {{"alpha", c.reg.alpha}, {"beta", c.reg.beta}, {"alpha_cls", c.reg.alpha_cls}, {"beta_cls", c.reg.beta_cls}};
  reg["decoupled"] = c.reg.decoupled ? json(*c.reg.decoupled) : json(nullptr);
  return {{"algo", to_string(c.algo)},
          {"variant", to_string(c.variant)},
          {"rank", c.rank},
          {"lr", c.lr},
          {"epochs", c.epochs},
          {"pre_epochs", c.pre_epochs},
          {"pre_lr", c.pre_lr},
          {"reg", reg},
          {"mog_components", c.mog_components},
          {"mog_samples", c.mog_samples},
          {"mog_iterations", c.mog_iterations},
          {"seed", c.seed},
          {"batch_size", c.batch_size},
          {"align_epochs", c.align_epochs},
          {"align_lr", c.align_lr},
          {"align_all_heads", c.align_all_heads},
          {"weight_decay", c.weight_decay},
          {"fisher_mode", c.fisher_mode == AccumulateMode::Sum ? "sum" : "weighted_mean"},
          {"cached_base", c.cached_base},
          {"parallel_tasks", c.parallel_tasks},
          {"threads", c.threads}};
}

RunConfigFile parse_run_config(const json& doc, const fs::path& base_dir) {
  RunConfigFile rc;
  Obj top(doc, "config");

  json train_in = json::object();
  if (auto* t = top.get("train")) train_in = *t;
  Obj t(train_in, "train");
  TrainConfig& c = rc.train;
  std::string algo = "ITA", variant = "FFT", fisher_mode = "weighted_mean";
  t.text("algo", algo);
  t.text("variant", variant);
  t.text("fisher_mode", fisher_mode);
  rethrow_as_schema([&] {
    c.algo = algo_from_string(algo);
    c.variant = variant_from_string(variant);
    return 0;
  });
  if (fisher_mode == "weighted_mean") c.fisher_mode = AccumulateMode::WeightedMean;
  else if (fisher_mode == "sum") c.fisher_mode = AccumulateMode::Sum;
  else throw SchemaError("train.fisher_mode must be weighted_mean or sum");
  t.count("rank", c.rank);
  c.lr = TrainConfig::default_lr(c.variant);
  t.number("lr", c.lr);
  t.count("epochs", c.epochs);
  t.count("pre_epochs", c.pre_epochs);
  t.number("pre_lr", c.pre_lr);
  t.count("mog_components", c.mog_components);
  t.count("mog_samples", c.mog_samples);
  t.count("mog_iterations", c.mog_iterations);
  t.seed("seed", c.seed);
  t.count("batch_size", c.batch_size);
  t.count("align_epochs", c.align_epochs);
  t.number("align_lr", c.align_lr);
  t.flag("align_all_heads", c.align_all_heads);
  t.number("weight_decay", c.weight_decay);
  t.flag("cached_base", c.cached_base);
  t.flag("parallel_tasks", c.parallel_tasks);
  t.count("threads", c.threads);
  if (auto* r = t.get("reg")) {
    Obj reg(*r, "train.reg");
    reg.number("alpha", c.reg.alpha);
    reg.number("beta", c.reg.beta);
    reg.number("alpha_cls", c.reg.alpha_cls);
    reg.number("beta_cls", c.reg.beta_cls);
    if (reg.has("decoupled")) {
      bool d = false;
      reg.flag("decoupled", d);
      c.reg.decoupled = d;
    }
    reg.finish();
  }
  t.finish();
  rethrow_as_schema([&] {
    c.validate();
    return 0;
  });

  if (auto* n = top.get("net")) {
    Obj net(*n, "net");
    net.list("hidden", rc.net.hidden);
    std::string act = std::string(to_string(rc.net.activation));
    net.text("activation", act);
    rethrow_as_schema([&] {
      rc.net.activation = activation_from_string(act);
      return 0;
    });
    if (net.has("init_seed")) {
      std::uint64_t s = 0;
      net.seed("init_seed", s);
      rc.net.init_seed = s;
    }
    net.number("weight_scale", rc.net.weight_scale);
    if (!(rc.net.weight_scale > 0.0)) throw SchemaError("net.weight_scale must be positive");
    for (auto h : rc.net.hidden)
      if (h == 0) throw SchemaError("net.hidden widths must be positive");
    net.finish();
  }

  const json* ds = top.get("dataset");
  if (!ds) throw SchemaError("config: missing required key 'dataset'");
  rc.dataset = parse_dataset_spec(*ds, base_dir);

  if (top.has("output")) rc.output = resolve(top.required_text("output"), base_dir);

  if (auto* e = top.get("edits")) {
    if (!e->is_array()) throw SchemaError("config.edits must be an array");
    for (std::size_t i = 0; i < e->size(); ++i) {
      Obj edit((*e)[i], "edits[" + std::to_string(i) + "]");
      EditSpec spec;
      edit.list("specialize", spec.specialize);
      edit.integer("unlearn", spec.unlearn);
      std::string mode = "renormalize";
      edit.text("mode", mode);
      if (mode == "subtract") spec.mode = UnlearnMode::Subtract;
      else if (mode != "renormalize") throw SchemaError(edit.where("mode") + " must be renormalize or subtract");
      edit.finish();
      if (spec.specialize.empty() == (spec.unlearn == 0))
        throw SchemaError("edits[" + std::to_string(i) + "] needs exactly one of specialize or unlearn");
      rc.edits.push_back(std::move(spec));
    }
  }
  top.finish();
  return rc;
}

RunConfigFile load_run_config(const fs::path& path) {
  return parse_run_config(parse_document(path), fs::absolute(path).parent_path());
}

}  // namespace taskvec::cli
