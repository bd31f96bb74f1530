#pragma once

#include <filesystem>

#include <nlohmann/json.hpp>

#include "taskvec/nn.hpp"
#include "taskvec/param.hpp"
#include "taskvec/pool.hpp"

namespace taskvec {

// A pool on disk: a JSON manifest next to a little-endian f64 blob with the
// same stem and a ".bin" extension.
struct PoolFile {
  NetSpec net;
  Pool pool;
  FisherDiagonal fisher;
  nlohmann::json metadata = nlohmann::json::object();
};

void save_pool(const std::filesystem::path& manifest, const PoolFile& file);
PoolFile load_pool(const std::filesystem::path& manifest);

// Single parameter vector (e.g. edited weights) in the same two-file form.
void save_params(const std::filesystem::path& manifest, const ParamVector& params, const NetSpec& net);
std::pair<ParamVector, NetSpec> load_params(const std::filesystem::path& manifest);

nlohmann::json to_json(const NetSpec& spec);
NetSpec net_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ParamLayout& layout);
ParamLayout layout_from_json(const nlohmann::json& j);

}  // namespace taskvec
