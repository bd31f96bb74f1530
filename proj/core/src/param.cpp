#include "taskvec/param.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "taskvec/errors.hpp"

namespace taskvec {

std::string_view to_string(EntryKind kind) {
  switch (kind) {
    case EntryKind::BackboneWeight: return "backbone-weight";
    case EntryKind::BackboneBias: return "backbone-bias";
    case EntryKind::HeadWeight: return "head-weight";
    case EntryKind::HeadBias: return "head-bias";
  }
  return "unknown";
}

EntryKind entry_kind_from_string(std::string_view text) {
  if (text == "backbone-weight") return EntryKind::BackboneWeight;
  if (text == "backbone-bias") return EntryKind::BackboneBias;
  if (text == "head-weight") return EntryKind::HeadWeight;
  if (text == "head-bias") return EntryKind::HeadBias;
  throw FormatError("unknown layout entry kind '" + std::string(text) + "'");
}

std::size_t LayoutEntry::size() const {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void ParamLayout::append(std::string name, std::vector<std::size_t> shape, EntryKind kind,
                         int task_id) {
  if (find(name)) throw LayoutError("duplicate layout entry '" + name + "'");
  if (shape.empty() || shape.size() > 2)
    throw LayoutError("entry '" + name + "' must be a vector or a matrix");
  for (auto dim : shape)
    if (dim == 0) throw LayoutError("entry '" + name + "' has a zero dimension");

  const bool head = kind == EntryKind::HeadWeight || kind == EntryKind::HeadBias;
  if (head) {
    if (task_id < 1) throw LayoutError("head entry '" + name + "' needs a task id >= 1");
    for (const auto& e : entries_)
      if (e.is_head() && e.task_id > task_id)
        throw LayoutError("head entries must appear in increasing task-id order");
  } else {
    if (std::any_of(entries_.begin(), entries_.end(), [](const auto& e) { return e.is_head(); }))
      throw LayoutError("backbone entry '" + name + "' cannot follow head entries");
    task_id = 0;
  }

  LayoutEntry entry{std::move(name), std::move(shape), kind, task_id, total_len_};
  total_len_ += entry.size();
  entries_.push_back(std::move(entry));
}

std::optional<std::size_t> ParamLayout::find(std::string_view name) const {
  for (std::size_t i = 0; i < entries_.size(); ++i)
    if (entries_[i].name == name) return i;
  return std::nullopt;
}

const LayoutEntry& ParamLayout::at(std::string_view name) const {
  auto idx = find(name);
  if (!idx) throw LayoutError("no layout entry named '" + std::string(name) + "'");
  return entries_[*idx];
}

bool ParamLayout::is_prefix_of(const ParamLayout& other) const {
  if (entries_.size() > other.entries_.size()) return false;
  return std::equal(entries_.begin(), entries_.end(), other.entries_.begin());
}

int ParamLayout::num_heads() const {
  int heads = 0;
  for (const auto& e : entries_)
    if (e.kind == EntryKind::HeadBias) heads = std::max(heads, e.task_id);
  return heads;
}

std::size_t ParamLayout::num_classes() const {
  std::size_t classes = 0;
  for (const auto& e : entries_)
    if (e.kind == EntryKind::HeadBias) classes += e.size();
  return classes;
}

std::size_t ParamLayout::class_offset(int task_id) const {
  std::size_t offset = 0;
  for (const auto& e : entries_) {
    if (e.kind != EntryKind::HeadBias) continue;
    if (e.task_id == task_id) return offset;
    offset += e.size();
  }
  throw LayoutError("no head for task " + std::to_string(task_id));
}

ParamVector::ParamVector(ParamLayout layout)
    : layout_(std::move(layout)), values_(layout_.total_len(), 0.0) {}

ParamVector::ParamVector(ParamLayout layout, std::vector<double> values)
    : layout_(std::move(layout)), values_(std::move(values)) {
  if (values_.size() != layout_.total_len())
    throw LayoutError("parameter array has " + std::to_string(values_.size()) +
                      " values but the layout needs " + std::to_string(layout_.total_len()));
  if (!all_finite()) throw ValidationError("parameter array contains non-finite values");
}

std::span<const double> ParamVector::entry(std::size_t index) const {
  const auto& e = layout_.entry(index);
  return std::span<const double>(values_).subspan(e.offset, e.size());
}

std::span<double> ParamVector::entry(std::size_t index) {
  const auto& e = layout_.entry(index);
  return std::span<double>(values_).subspan(e.offset, e.size());
}

std::span<const double> ParamVector::entry(std::string_view name) const {
  const auto& e = layout_.at(name);
  return std::span<const double>(values_).subspan(e.offset, e.size());
}

std::span<double> ParamVector::entry(std::string_view name) {
  const auto& e = layout_.at(name);
  return std::span<double>(values_).subspan(e.offset, e.size());
}

ParamVector ParamVector::extended_to(const ParamLayout& larger) const {
  if (!layout_.is_prefix_of(larger))
    throw LayoutError("cannot extend a parameter vector to an incompatible layout");
  ParamVector out(larger);
  std::copy(values_.begin(), values_.end(), out.values_.begin());
  return out;
}

void ParamVector::require_same_layout(const ParamVector& other, const char* op) const {
  if (values_.size() != other.values_.size() || !(layout_ == other.layout_))
    throw LayoutError(std::string("layout mismatch in ") + op);
}

ParamVector& ParamVector::operator+=(const ParamVector& other) {
  require_same_layout(other, "+=");
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += other.values_[i];
  return *this;
}

ParamVector& ParamVector::operator-=(const ParamVector& other) {
  require_same_layout(other, "-=");
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] -= other.values_[i];
  return *this;
}

ParamVector& ParamVector::operator*=(double scale) {
  for (auto& v : values_) v *= scale;
  return *this;
}

ParamVector& ParamVector::operator/=(double divisor) {
  for (auto& v : values_) v /= divisor;
  return *this;
}

ParamVector& ParamVector::add_scaled(const ParamVector& other, double scale) {
  require_same_layout(other, "add_scaled");
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += scale * other.values_[i];
  return *this;
}

double ParamVector::dot(const ParamVector& other) const {
  require_same_layout(other, "dot");
  double acc = 0.0;
  for (std::size_t i = 0; i < values_.size(); ++i) acc += values_[i] * other.values_[i];
  return acc;
}

double ParamVector::norm() const {
  double acc = 0.0;
  for (double v : values_) acc += v * v;
  return std::sqrt(acc);
}

double ParamVector::max_abs() const {
  double m = 0.0;
  for (double v : values_) m = std::max(m, std::abs(v));
  return m;
}

bool ParamVector::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

ParamVector operator+(ParamVector lhs, const ParamVector& rhs) { return lhs += rhs; }
ParamVector operator-(ParamVector lhs, const ParamVector& rhs) { return lhs -= rhs; }
ParamVector operator*(ParamVector lhs, double scale) { return lhs *= scale; }
ParamVector operator*(double scale, ParamVector rhs) { return rhs *= scale; }

FisherDiagonal::FisherDiagonal(ParamLayout layout) : values_(std::move(layout)) {}

FisherDiagonal::FisherDiagonal(ParamVector values, std::size_t sample_count)
    : values_(std::move(values)), sample_count_(sample_count) {
  for (double v : values_.values())
    if (!(v >= 0.0)) throw ValidationError("Fisher diagonal entries must be nonnegative");
}

FisherDiagonal FisherDiagonal::extended_to(const ParamLayout& larger) const {
  return FisherDiagonal(values_.extended_to(larger), sample_count_);
}

}  // namespace taskvec
