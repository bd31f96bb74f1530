#include "taskvec/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iterator>
#include <map>
#include <random>
#include <set>

#include "taskvec/errors.hpp"

namespace taskvec {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finaliser over seed and stream id
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::vector<ClassRange> partition_classes(std::size_t num_classes, std::size_t tasks) {
  if (tasks == 0) throw ValidationError("at least one task is required");
  if (num_classes < tasks)
    throw ValidationError("cannot split " + std::to_string(num_classes) + " classes into " +
                          std::to_string(tasks) + " tasks");
  std::vector<ClassRange> out;
  const std::size_t base = num_classes / tasks;
  const std::size_t extra = num_classes % tasks;
  std::size_t start = 0;
  for (std::size_t t = 0; t < tasks; ++t) {
    const std::size_t len = base + (t < extra ? 1 : 0);
    out.push_back({start, start + len});
    start += len;
  }
  return out;
}

void TaskStream::validate() const {
  if (tasks.empty()) throw ValidationError("task stream is empty");
  std::size_t expected = 0;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const auto& task = tasks[t];
    const std::string where = "task " + std::to_string(t + 1);
    if (task.range.start != expected || task.range.size() == 0)
      throw ValidationError(where + ": class ranges must be contiguous, disjoint and non-empty");
    expected = task.range.end;
    if (task.train.empty()) throw ValidationError(where + ": empty training split");
    for (const Batch* b : {&task.train, &task.val, &task.test}) {
      if (!b->empty() && std::size_t(b->inputs.cols()) != input_dim)
        throw ValidationError(where + ": input width does not match the stream");
      if (std::size_t(b->inputs.rows()) != b->size())
        throw ValidationError(where + ": row/label count mismatch");
      for (int y : b->labels)
        if (!task.range.contains(y))
          throw ValidationError(where + ": label " + std::to_string(y) + " outside its class range");
    }
  }
  if (expected != total_classes) throw ValidationError("class ranges do not cover every class");
}

namespace {

struct Rows {
  Matrix x;
  std::vector<int> y;
};

Batch take(const Rows& src, const std::vector<std::size_t>& idx) {
  Batch b;
  b.inputs.resize(Eigen::Index(idx.size()), src.x.cols());
  b.labels.reserve(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    b.inputs.row(Eigen::Index(i)) = src.x.row(Eigen::Index(idx[i]));
    b.labels.push_back(src.y[idx[i]]);
  }
  return b;
}

std::size_t round_share(std::size_t n, double fraction) {
  auto k = std::size_t(std::floor(double(n) * fraction + 0.5));
  if (k == 0 && n >= 2 && fraction > 0.0) k = 1;
  return std::min(k, n);
}

enum class OrderMode { Shuffle, ContentHash };

std::uint64_t row_hash(const Rows& p, std::size_t i, std::uint64_t seed) {
  std::uint64_t h = 0xcbf29ce484222325ULL ^ seed;
  auto feed = [&h](const void* data, std::size_t len) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t k = 0; k < len; ++k) {
      h ^= bytes[k];
      h *= 0x100000001b3ULL;
    }
  };
  for (Eigen::Index j = 0; j < p.x.cols(); ++j) {
    const double v = p.x(Eigen::Index(i), j) == 0.0 ? 0.0 : p.x(Eigen::Index(i), j);  // fold -0
    feed(&v, sizeof v);
  }
  feed(&p.y[i], sizeof(int));
  return mix_seed(h, seed);
}

// Rows of `src` belonging to `range`, put in a seed-determined order.
std::vector<std::size_t> ordered_rows(const Rows& src, ClassRange range, OrderMode mode, std::uint64_t seed) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < src.y.size(); ++i)
    if (range.contains(src.y[i])) idx.push_back(i);
  if (mode == OrderMode::Shuffle) {
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    return idx;
  }
  std::vector<std::pair<std::uint64_t, std::size_t>> keyed;
  keyed.reserve(idx.size());
  for (auto i : idx) keyed.emplace_back(row_hash(src, i, seed), i);
  std::sort(keyed.begin(), keyed.end(), [&src](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first < b.first;
    // Equal hashes: order by contents so the result ignores file order.
    const auto ra = src.x.row(Eigen::Index(a.second));
    const auto rb = src.x.row(Eigen::Index(b.second));
    for (Eigen::Index j = 0; j < ra.size(); ++j)
      if (ra(j) != rb(j)) return ra(j) < rb(j);
    return src.y[a.second] < src.y[b.second];
  });
  for (std::size_t k = 0; k < keyed.size(); ++k) idx[k] = keyed[k].second;
  return idx;
}

TaskStream assemble(const Rows& pool, const Rows* test, std::size_t num_classes, const SplitOptions& opt,
                    OrderMode mode) {
  TaskStream s;
  s.input_dim = std::size_t(pool.x.cols());
  s.total_classes = num_classes;
  const auto ranges = partition_classes(num_classes, opt.tasks);
  if (!test && !(opt.test_fraction > 0.0 && opt.test_fraction < 1.0))
    throw ValidationError("test_fraction must lie in (0, 1) without a separate test source");
  for (std::size_t t = 0; t < ranges.size(); ++t) {
    const auto order = ordered_rows(pool, ranges[t], mode, mix_seed(opt.seed, 1000 + t));
    std::size_t cursor = 0;
    TaskData task;
    task.range = ranges[t];
    if (!test) {
      const auto n_test = round_share(order.size(), opt.test_fraction);
      task.test = take(pool, {order.begin(), order.begin() + std::ptrdiff_t(n_test)});
      cursor = n_test;
    }
    const auto n_val = round_share(order.size() - cursor, kValFraction);
    task.val = take(pool, {order.begin() + std::ptrdiff_t(cursor), order.begin() + std::ptrdiff_t(cursor + n_val)});
    task.train = take(pool, {order.begin() + std::ptrdiff_t(cursor + n_val), order.end()});
    if (test) {
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < test->y.size(); ++i)
        if (ranges[t].contains(test->y[i])) idx.push_back(i);
      task.test = take(*test, idx);
    }
    s.tasks.push_back(std::move(task));
  }
  s.validate();
  return s;
}

// Maps original labels to 0..C-1 following `order` (or sorted distinct labels).
std::map<int, int> label_map(const std::vector<int>& labels, const std::vector<int>& order) {
  std::set<int> distinct(labels.begin(), labels.end());
  std::map<int, int> out;
  if (order.empty()) {
    int next = 0;
    for (int l : distinct) out[l] = next++;
    return out;
  }
  std::set<int> given(order.begin(), order.end());
  if (given.size() != order.size()) throw ValidationError("class_order contains duplicates");
  for (int l : distinct)
    if (!given.count(l)) throw ValidationError("class_order is missing label " + std::to_string(l));
  for (std::size_t i = 0; i < order.size(); ++i) out[order[i]] = int(i);
  return out;
}

void remap(std::vector<int>& labels, const std::map<int, int>& m) {
  for (auto& l : labels) {
    auto it = m.find(l);
    if (it == m.end()) throw ValidationError("label " + std::to_string(l) + " is not part of the class order");
    l = it->second;
  }
}

std::vector<std::uint8_t> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TaskStream gen_blobs(const BlobOptions& o) {
  if (o.tasks == 0 || o.classes_per_task == 0 || o.dim == 0 || o.samples_per_class == 0)
    throw ValidationError("blob counts must all be >= 1");
  if (!(o.spread >= 0.0) || !(o.mean_scale >= 0.0)) throw ValidationError("blob spread/scale must be >= 0");
  const std::size_t classes = o.tasks * o.classes_per_task;
  const auto d = Eigen::Index(o.dim);
  std::normal_distribution<double> normal(0.0, 1.0);

  std::mt19937_64 mean_rng(mix_seed(o.seed, 1));
  Matrix means(Eigen::Index(classes), d);
  for (Eigen::Index c = 0; c < means.rows(); ++c)
    for (Eigen::Index j = 0; j < d; ++j) means(c, j) = o.mean_scale * normal(mean_rng);

  auto draw = [&](std::uint64_t stream) {
    std::mt19937_64 rng(mix_seed(o.seed, stream));
    Rows p;
    p.x.resize(Eigen::Index(classes * o.samples_per_class), d);
    Eigen::Index r = 0;
    for (std::size_t c = 0; c < classes; ++c)
      for (std::size_t i = 0; i < o.samples_per_class; ++i, ++r) {
        for (Eigen::Index j = 0; j < d; ++j) p.x(r, j) = means(Eigen::Index(c), j) + o.spread * normal(rng);
        p.y.push_back(int(c));
      }
    return p;
  };
  const Rows pool = draw(2);
  const Rows test = draw(3);
  SplitOptions split;
  split.tasks = o.tasks;
  split.seed = o.seed;
  return assemble(pool, &test, classes, split, OrderMode::Shuffle);
}

IdxArray read_idx(const std::filesystem::path& path) {
  const auto bytes = slurp(path);
  auto fail = [&](std::size_t offset, const std::string& what) -> FormatError {
    return FormatError(path.string() + ": " + what + " at byte offset " + std::to_string(offset));
  };
  if (bytes.size() < 4) throw fail(bytes.size(), "truncated magic number");
  if (bytes[0] != 0 || bytes[1] != 0) throw fail(0, "bad magic number");
  IdxArray out;
  out.type = bytes[2];
  if (out.type != 0x08) throw fail(2, "unsupported element type");
  const std::size_t ndim = bytes[3];
  if (ndim == 0) throw fail(3, "zero dimensions");
  const std::size_t header = 4 + 4 * ndim;
  if (bytes.size() < header) throw fail(bytes.size(), "truncated dimension header");
  std::size_t count = 1;
  for (std::size_t k = 0; k < ndim; ++k) {
    const std::size_t o = 4 + 4 * k;
    const std::uint32_t dim = (std::uint32_t(bytes[o]) << 24) | (std::uint32_t(bytes[o + 1]) << 16) |
                              (std::uint32_t(bytes[o + 2]) << 8) | std::uint32_t(bytes[o + 3]);
    out.dims.push_back(dim);
    count *= dim;
  }
  if (bytes.size() < header + count)
    throw fail(bytes.size(), "truncated data (expected " + std::to_string(count) + " bytes from offset " +
                                 std::to_string(header) + ")");
  if (bytes.size() > header + count) throw fail(header + count, "trailing bytes");
  out.data.assign(bytes.begin() + std::ptrdiff_t(header), bytes.end());
  return out;
}

namespace {

Rows idx_pool(const IdxSource& src, std::size_t max_rows) {
  const auto images = read_idx(src.images);
  const auto labels = read_idx(src.labels);
  if (images.dims.size() != 3) throw FormatError(src.images.string() + ": expected magic 0x00000803 (3-D images)");
  if (labels.dims.size() != 1) throw FormatError(src.labels.string() + ": expected magic 0x00000801 (labels)");
  if (images.dims[0] != labels.dims[0])
    throw FormatError("image count " + std::to_string(images.dims[0]) + " does not match label count " +
                      std::to_string(labels.dims[0]));
  std::size_t n = images.dims[0];
  if (max_rows > 0) n = std::min(n, max_rows);
  const std::size_t width = std::size_t(images.dims[1]) * images.dims[2];
  Rows p;
  p.x.resize(Eigen::Index(n), Eigen::Index(width));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < width; ++j)
      p.x(Eigen::Index(i), Eigen::Index(j)) = double(images.data[i * width + j]) / 255.0;
  p.y.assign(labels.data.begin(), labels.data.begin() + std::ptrdiff_t(n));
  return p;
}

}  // namespace

TaskStream load_idx(const IdxSource& train, const std::optional<IdxSource>& test, const SplitOptions& options,
                    std::size_t max_rows) {
  Rows pool = idx_pool(train, max_rows);
  const auto m = label_map(pool.y, options.class_order);
  remap(pool.y, m);
  if (!test) return assemble(pool, nullptr, m.size(), options, OrderMode::Shuffle);
  Rows t = idx_pool(*test, 0);
  if (t.x.cols() != pool.x.cols()) throw FormatError("test images have a different size");
  remap(t.y, m);
  return assemble(pool, &t, m.size(), options, OrderMode::Shuffle);
}

CsvTable read_csv(const std::filesystem::path& path, const CsvOptions& options) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<std::vector<double>> rows;
  std::size_t width = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1 && options.header) continue;
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::vector<double> row;
    std::size_t col = 0;
    std::size_t pos = 0;
    while (true) {
      ++col;
      const auto comma = line.find(',', pos);
      std::string cell = line.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
      const auto b = cell.find_first_not_of(" \t");
      const auto e = cell.find_last_not_of(" \t");
      cell = b == std::string::npos ? std::string() : cell.substr(b, e - b + 1);
      if (cell.size() >= 2 && cell.front() == '"' && cell.back() == '"') cell = cell.substr(1, cell.size() - 2);
      double v = 0.0;
      const auto* first = cell.data();
      const auto* last = cell.data() + cell.size();
      if (!cell.empty() && *first == '+') ++first;
      auto [ptr, ec] = std::from_chars(first, last, v);
      if (cell.empty() || ec != std::errc() || ptr != last || !std::isfinite(v))
        throw FormatError(path.string() + ": non-numeric cell '" + cell + "' at line " + std::to_string(line_no) +
                          ", column " + std::to_string(col));
      row.push_back(v);
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    if (width == 0) width = row.size();
    if (row.size() != width)
      throw FormatError(path.string() + ": ragged row at line " + std::to_string(line_no) + " (" +
                        std::to_string(row.size()) + " fields, expected " + std::to_string(width) + ")");
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw FormatError(path.string() + ": no data rows");
  if (width < 2) throw FormatError(path.string() + ": need at least one feature column and a label column");
  const int w = int(width);
  const int lc = options.label_column < 0 ? w + options.label_column : options.label_column;
  if (lc < 0 || lc >= w) throw ValidationError("label column out of range");

  CsvTable t;
  t.features.resize(Eigen::Index(rows.size()), Eigen::Index(width - 1));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    Eigen::Index j = 0;
    for (int c = 0; c < w; ++c) {
      if (c == lc) continue;
      t.features(Eigen::Index(i), j++) = rows[i][std::size_t(c)];
    }
    const double l = rows[i][std::size_t(lc)];
    if (l != std::floor(l) || l < 0.0 || l > 2e9)
      throw FormatError(path.string() + ": label '" + std::to_string(l) + "' is not a non-negative integer (row " +
                        std::to_string(i + 1) + ", column " + std::to_string(lc + 1) + ")");
    t.labels.push_back(int(l));
  }
  return t;
}

TaskStream load_csv(const std::filesystem::path& path, const std::optional<std::filesystem::path>& test,
                    const CsvOptions& csv, const SplitOptions& options) {
  auto table = read_csv(path, csv);
  Rows pool{std::move(table.features), std::move(table.labels)};
  const auto m = label_map(pool.y, options.class_order);
  remap(pool.y, m);
  if (!test) return assemble(pool, nullptr, m.size(), options, OrderMode::ContentHash);
  auto tt = read_csv(*test, csv);
  if (tt.features.cols() != pool.x.cols()) throw FormatError("test CSV has a different number of columns");
  Rows t{std::move(tt.features), std::move(tt.labels)};
  remap(t.y, m);
  return assemble(pool, &t, m.size(), options, OrderMode::ContentHash);
}

}  // namespace taskvec
