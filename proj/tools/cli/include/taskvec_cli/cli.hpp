#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "taskvec/data.hpp"
#include "taskvec/errors.hpp"
#include "taskvec/nn.hpp"
#include "taskvec/pool.hpp"
#include "taskvec/trainers.hpp"

namespace taskvec::cli {

enum ExitCode : int { kOk = 0, kVerifyFailed = 1, kUsage = 2, kNumeric = 3 };

// Configuration problems found before any work starts.
class SchemaError : public Error {
 public:
  using Error::Error;
};

struct NetConfig {
  std::vector<std::size_t> hidden{16, 16};
  Activation activation = Activation::Tanh;
  std::optional<std::uint64_t> init_seed;  // unset: train seed + 1
  double weight_scale = 1.0;
};

struct EditSpec {
  std::vector<int> specialize;  // non-empty for a specialisation
  int unlearn = 0;              // task id for an unlearning edit
  UnlearnMode mode = UnlearnMode::Renormalize;
};

struct RunConfigFile {
  TrainConfig train;
  NetConfig net;
  nlohmann::json dataset;  // {kind, params}; relative paths already resolved
  std::optional<std::filesystem::path> output;
  std::vector<EditSpec> edits;
};

// Unknown keys, wrong types and out-of-range values raise SchemaError.
// Relative dataset paths resolve against `base_dir`.
RunConfigFile parse_run_config(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});
RunConfigFile load_run_config(const std::filesystem::path& path);
nlohmann::json to_json(const TrainConfig& cfg);

// {kind: blobs|idx|csv, params: {...}}
nlohmann::json parse_dataset_spec(const nlohmann::json& spec, const std::filesystem::path& base_dir);
TaskStream load_dataset(const nlohmann::json& spec);
// A dataset spec file, or a run config whose "dataset" member is used.
nlohmann::json load_dataset_file(const std::filesystem::path& path);

struct TaskAccuracy {
  std::size_t task = 0;  // 1-based
  std::size_t samples = 0;
  double accuracy = 0.0;
};

// Global-argmax accuracy of `theta` on every task's test split, and the
// sample-weighted overall value.
std::vector<TaskAccuracy> evaluate(const Network& net, const ParamVector& theta, const TaskStream& stream);
double overall_accuracy(const std::vector<TaskAccuracy>& per_task);

struct EditReport {
  std::vector<int> targets;
  std::vector<TaskAccuracy> edited;
  std::vector<TaskAccuracy> unedited;
  double fa_tgt = 0.0;
  std::optional<double> fa_ctrl;
  double unedited_fa_tgt = 0.0;
  std::optional<double> unedited_fa_ctrl;
};

ParamVector apply_edit(const Pool& pool, const EditSpec& edit);
EditReport edit_report(const Network& net, const Pool& pool, const EditSpec& edit, const TaskStream& stream);
nlohmann::json to_json(const EditReport& report);

// Worker count for verification: TASKVEC_THREADS when set, else the hardware.
std::size_t thread_budget();

// Full command line without the program name, e.g. {"verify", "--suite", "o1"}.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace taskvec::cli
