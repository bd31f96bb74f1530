#include "taskvec/io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "taskvec/errors.hpp"
#include "taskvec/task_vector.hpp"

namespace taskvec {

namespace {

constexpr int kVersion = 1;

std::filesystem::path blob_path(const std::filesystem::path& manifest) {
  auto p = manifest;
  p.replace_extension(".bin");
  return p;
}

class BlobWriter {
 public:
  // Returns the element offset of the appended run.
  std::size_t append(std::span<const double> values) {
    const std::size_t offset = count_;
    for (double v : values) {
      std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
      for (int b = 0; b < 8; ++b) bytes_.push_back(char((bits >> (8 * b)) & 0xFF));
    }
    count_ += values.size();
    return offset;
  }
  void write(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path.string());
    out.write(bytes_.data(), std::streamsize(bytes_.size()));
    if (!out) throw FormatError("failed writing " + path.string());
  }
  std::size_t count() const { return count_; }

 private:
  std::vector<char> bytes_;
  std::size_t count_ = 0;
};

class BlobReader {
 public:
  explicit BlobReader(const std::filesystem::path& path) : path_(path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    bytes_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    if (bytes_.size() % 8 != 0)
      throw FormatError(path.string() + ": size " + std::to_string(bytes_.size()) + " is not a multiple of 8");
  }
  std::size_t count() const { return bytes_.size() / 8; }
  std::vector<double> read(std::size_t offset, std::size_t length) const {
    if (offset + length > count())
      throw FormatError(path_.string() + ": range [" + std::to_string(offset) + ", " +
                        std::to_string(offset + length) + ") exceeds " + std::to_string(count()) + " values");
    std::vector<double> out(length);
    for (std::size_t i = 0; i < length; ++i) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b)
        bits |= std::uint64_t(static_cast<unsigned char>(bytes_[(offset + i) * 8 + std::size_t(b)])) << (8 * b);
      out[i] = std::bit_cast<double>(bits);
    }
    return out;
  }

 private:
  std::filesystem::path path_;
  std::vector<char> bytes_;
};

nlohmann::json read_manifest(const std::filesystem::path& path, const char* format) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  if (j.value("format", "") != format) throw FormatError(path.string() + ": not a " + std::string(format) + " file");
  if (j.value("version", 0) != kVersion) throw FormatError(path.string() + ": unsupported version");
  return j;
}

void write_manifest(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

nlohmann::json slice(std::size_t offset, std::size_t length) { return {{"offset", offset}, {"length", length}}; }

std::string_view block_kind_name(AdapterBlock::Kind k) {
  switch (k) {
    case AdapterBlock::Kind::Dense: return "dense";
    case AdapterBlock::Kind::LowRank: return "low-rank";
    case AdapterBlock::Kind::RowScale: return "row-scale";
  }
  return "?";
}

AdapterBlock::Kind block_kind_from(const std::string& s) {
  if (s == "dense") return AdapterBlock::Kind::Dense;
  if (s == "low-rank") return AdapterBlock::Kind::LowRank;
  if (s == "row-scale") return AdapterBlock::Kind::RowScale;
  throw FormatError("unknown adapter block kind '" + s + "'");
}

ParamLayout prefix_layout(const ParamLayout& full, std::size_t entries) {
  if (entries > full.num_entries()) throw FormatError("task vector layout is longer than theta0's");
  ParamLayout out;
  for (std::size_t i = 0; i < entries; ++i) {
    const auto& e = full.entry(i);
    out.append(e.name, e.shape, e.kind, e.task_id);
  }
  return out;
}

template <typename F>
auto wrap_json(const std::filesystem::path& path, F&& fn) {
  try {
    return fn();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": malformed manifest: " + e.what());
  }
}

}  // namespace

nlohmann::json to_json(const NetSpec& spec) {
  return {{"input_dim", spec.input_dim}, {"hidden", spec.hidden}, {"activation", std::string(to_string(spec.activation))}};
}

NetSpec net_spec_from_json(const nlohmann::json& j) {
  NetSpec s;
  s.input_dim = j.at("input_dim").get<std::size_t>();
  s.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  s.activation = activation_from_string(j.at("activation").get<std::string>());
  s.validate();
  return s;
}

nlohmann::json to_json(const ParamLayout& layout) {
  auto arr = nlohmann::json::array();
  for (const auto& e : layout.entries())
    arr.push_back({{"name", e.name}, {"shape", e.shape}, {"kind", std::string(to_string(e.kind))}, {"task_id", e.task_id}});
  return arr;
}

ParamLayout layout_from_json(const nlohmann::json& j) {
  ParamLayout layout;
  for (const auto& e : j)
    layout.append(e.at("name").get<std::string>(), e.at("shape").get<std::vector<std::size_t>>(),
                  entry_kind_from_string(e.at("kind").get<std::string>()), e.at("task_id").get<int>());
  return layout;
}

void save_pool(const std::filesystem::path& manifest, const PoolFile& file) {
  const Pool& pool = file.pool;
  BlobWriter blob;
  nlohmann::json j;
  j["format"] = "taskvec-pool";
  j["version"] = kVersion;
  j["blob"] = blob_path(manifest).filename().string();
  j["net"] = to_json(file.net);
  j["layout"] = to_json(pool.theta0().layout());
  j["theta0"] = slice(blob.append(pool.theta0().values()), pool.theta0().size());
  if (file.fisher.empty()) {
    j["fisher"] = nullptr;
  } else {
    if (!file.fisher.layout().is_prefix_of(pool.theta0().layout()))
      throw LayoutError("Fisher layout does not fit the pool's theta0");
    auto f = slice(blob.append(file.fisher.values().values()), file.fisher.values().size());
    f["entries"] = file.fisher.layout().num_entries();
    f["sample_count"] = file.fisher.sample_count();
    j["fisher"] = f;
  }
  j["weights"] = pool.has_custom_weights() ? nlohmann::json(pool.weights()) : nlohmann::json(nullptr);
  auto vectors = nlohmann::json::array();
  for (const auto& tv : pool.vectors()) {
    nlohmann::json v = slice(blob.append(tv.params()), tv.num_params());
    v["variant"] = std::string(to_string(tv.variant()));
    v["rank"] = tv.rank();
    v["entries"] = tv.layout().num_entries();
    auto blocks = nlohmann::json::array();
    for (const auto& b : tv.blocks())
      blocks.push_back({{"kind", std::string(block_kind_name(b.kind))},
                        {"entry", b.entry},
                        {"rows", b.rows},
                        {"cols", b.cols},
                        {"rank", b.rank},
                        {"offset", b.offset}});
    v["blocks"] = blocks;
    vectors.push_back(v);
  }
  j["vectors"] = vectors;
  j["blob_values"] = blob.count();
  j["metadata"] = file.metadata;
  blob.write(blob_path(manifest));
  write_manifest(manifest, j);
}

PoolFile load_pool(const std::filesystem::path& manifest) {
  const auto j = read_manifest(manifest, "taskvec-pool");
  return wrap_json(manifest, [&] {
    const BlobReader blob(manifest.parent_path() / j.at("blob").get<std::string>());
    if (blob.count() != j.at("blob_values").get<std::size_t>())
      throw FormatError(manifest.string() + ": blob holds " + std::to_string(blob.count()) + " values, manifest says " +
                        std::to_string(j.at("blob_values").get<std::size_t>()));
    PoolFile file;
    file.net = net_spec_from_json(j.at("net"));
    const ParamLayout layout = layout_from_json(j.at("layout"));
    const auto& t0 = j.at("theta0");
    ParamVector theta0(layout, blob.read(t0.at("offset"), t0.at("length")));
    Network(file.net).check(theta0);
    file.pool = Pool(theta0);
    for (const auto& v : j.at("vectors")) {
      std::vector<AdapterBlock> blocks;
      for (const auto& b : v.at("blocks")) {
        AdapterBlock blk;
        blk.kind = block_kind_from(b.at("kind").get<std::string>());
        blk.entry = b.at("entry");
        blk.rows = b.at("rows");
        blk.cols = b.at("cols");
        blk.rank = b.at("rank");
        blk.offset = b.at("offset");
        blocks.push_back(blk);
      }
      file.pool.add(TaskVector::from_parts(variant_from_string(v.at("variant").get<std::string>()), v.at("rank"),
                                           prefix_layout(layout, v.at("entries")), std::move(blocks),
                                           blob.read(v.at("offset"), v.at("length"))));
    }
    if (!j.at("weights").is_null()) file.pool.set_weights(j.at("weights").get<std::vector<double>>());
    if (!j.at("fisher").is_null()) {
      const auto& f = j.at("fisher");
      file.fisher = FisherDiagonal(ParamVector(prefix_layout(layout, f.at("entries")), blob.read(f.at("offset"), f.at("length"))),
                                   f.at("sample_count").get<std::size_t>());
    }
    file.metadata = j.value("metadata", nlohmann::json::object());
    return file;
  });
}

void save_params(const std::filesystem::path& manifest, const ParamVector& params, const NetSpec& net) {
  BlobWriter blob;
  nlohmann::json j;
  j["format"] = "taskvec-params";
  j["version"] = kVersion;
  j["blob"] = blob_path(manifest).filename().string();
  j["net"] = to_json(net);
  j["layout"] = to_json(params.layout());
  j["values"] = slice(blob.append(params.values()), params.size());
  j["blob_values"] = blob.count();
  blob.write(blob_path(manifest));
  write_manifest(manifest, j);
}

std::pair<ParamVector, NetSpec> load_params(const std::filesystem::path& manifest) {
  const auto j = read_manifest(manifest, "taskvec-params");
  return wrap_json(manifest, [&] {
    const BlobReader blob(manifest.parent_path() / j.at("blob").get<std::string>());
    NetSpec net = net_spec_from_json(j.at("net"));
    const auto& v = j.at("values");
    ParamVector p(layout_from_json(j.at("layout")), blob.read(v.at("offset"), v.at("length")));
    Network(net).check(p);
    return std::pair{std::move(p), std::move(net)};
  });
}

}  // namespace taskvec
