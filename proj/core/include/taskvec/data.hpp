#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "taskvec/nn.hpp"

namespace taskvec {

struct TaskData {
  Batch train;
  Batch val;
  Batch test;
  ClassRange range;
};

// Ordered class-incremental tasks with contiguous, disjoint class ranges.
struct TaskStream {
  std::vector<TaskData> tasks;
  std::size_t input_dim = 0;
  std::size_t total_classes = 0;

  std::size_t num_tasks() const { return tasks.size(); }
  // Throws ValidationError when ranges overlap, leave gaps, or labels escape
  // their task's range.
  void validate() const;
};

inline constexpr double kValFraction = 0.1;

// Deterministic 64-bit mix, used to derive independent sub-seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

// Contiguous split of `num_classes` into `tasks` ranges; earlier ranges take
// the remainder when the division is uneven.
std::vector<ClassRange> partition_classes(std::size_t num_classes, std::size_t tasks);

struct BlobOptions {
  std::size_t tasks = 5;
  std::size_t classes_per_task = 2;
  std::size_t dim = 16;
  std::size_t samples_per_class = 200;
  double spread = 0.6;      // per-coordinate std of each cluster
  double mean_scale = 1.0;  // per-coordinate std of the class means
  std::uint64_t seed = 0;
};

// Gaussian clusters. `samples_per_class` rows per class are drawn for the
// train/val pool (split 90/10 by seeded shuffle) and again, from a separate
// sub-seed, for the test split.
TaskStream gen_blobs(const BlobOptions& options);

struct IdxArray {
  std::uint8_t type = 0;  // 0x08 = unsigned byte
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> data;
};

// Raw IDX reader (big-endian header). Throws FormatError naming the byte
// offset where the file stops making sense.
IdxArray read_idx(const std::filesystem::path& path);

struct SplitOptions {
  std::size_t tasks = 5;
  std::uint64_t seed = 0;
  // Original label of each class in incremental order; empty keeps the sorted
  // distinct labels.
  std::vector<int> class_order;
  // Share of each task held out for testing when no separate test source
  // exists.
  double test_fraction = 0.2;
};

struct IdxSource {
  std::filesystem::path images;
  std::filesystem::path labels;
};

// Pixels scaled to [0, 1]. With `test` set, its rows form the test split.
TaskStream load_idx(const IdxSource& train, const std::optional<IdxSource>& test,
                    const SplitOptions& options, std::size_t max_rows = 0);

struct CsvOptions {
  int label_column = -1;  // negative counts from the end
  bool header = false;
};

struct CsvTable {
  Matrix features;
  std::vector<int> labels;
};

// Rectangular numeric CSV. Errors name the 1-based line and column.
CsvTable read_csv(const std::filesystem::path& path, const CsvOptions& options);

// Split membership depends on row contents and the seed only, so reordering
// the file leaves every split unchanged.
TaskStream load_csv(const std::filesystem::path& path, const std::optional<std::filesystem::path>& test,
                    const CsvOptions& csv, const SplitOptions& options);

}  // namespace taskvec
