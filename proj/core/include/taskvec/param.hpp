#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace taskvec {

enum class EntryKind { BackboneWeight, BackboneBias, HeadWeight, HeadBias };

std::string_view to_string(EntryKind kind);
EntryKind entry_kind_from_string(std::string_view text);

struct LayoutEntry {
  std::string name;
  std::vector<std::size_t> shape;
  EntryKind kind = EntryKind::BackboneWeight;
  int task_id = 0;  // 1-based for heads, 0 for backbone entries
  std::size_t offset = 0;

  std::size_t size() const;
  std::size_t rows() const { return shape.empty() ? 1 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }
  bool is_head() const { return kind == EntryKind::HeadWeight || kind == EntryKind::HeadBias; }
  bool is_matrix() const { return shape.size() == 2; }

  bool operator==(const LayoutEntry&) const = default;
};

// Ordered list of named tensors backing a flat parameter array. Backbone
// entries come first, head entries follow in increasing task-id order, so
// adding a head only ever appends.
class ParamLayout {
 public:
  ParamLayout() = default;

  void append(std::string name, std::vector<std::size_t> shape, EntryKind kind, int task_id = 0);

  const std::vector<LayoutEntry>& entries() const { return entries_; }
  const LayoutEntry& entry(std::size_t i) const { return entries_.at(i); }
  std::size_t num_entries() const { return entries_.size(); }
  std::size_t total_len() const { return total_len_; }

  std::optional<std::size_t> find(std::string_view name) const;
  const LayoutEntry& at(std::string_view name) const;

  // True when `other` starts with exactly this layout's entries.
  bool is_prefix_of(const ParamLayout& other) const;

  int num_heads() const;
  std::size_t num_classes() const;
  // Global class offset of the first logit produced by head `task_id`.
  std::size_t class_offset(int task_id) const;

  bool operator==(const ParamLayout&) const = default;

 private:
  std::vector<LayoutEntry> entries_;
  std::size_t total_len_ = 0;
};

class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(ParamLayout layout);
  ParamVector(ParamLayout layout, std::vector<double> values);

  const ParamLayout& layout() const { return layout_; }
  std::size_t size() const { return values_.size(); }

  std::span<const double> values() const { return values_; }
  std::span<double> values() { return values_; }
  const std::vector<double>& raw() const { return values_; }

  std::span<const double> entry(std::size_t index) const;
  std::span<double> entry(std::size_t index);
  std::span<const double> entry(std::string_view name) const;
  std::span<double> entry(std::string_view name);

  double operator[](std::size_t i) const { return values_[i]; }
  double& operator[](std::size_t i) { return values_[i]; }

  // Zero-padded copy in a layout this one is a prefix of.
  ParamVector extended_to(const ParamLayout& larger) const;

  ParamVector& operator+=(const ParamVector& other);
  ParamVector& operator-=(const ParamVector& other);
  ParamVector& operator*=(double scale);
  ParamVector& operator/=(double divisor);
  // this += scale * other
  ParamVector& add_scaled(const ParamVector& other, double scale);

  double dot(const ParamVector& other) const;
  double norm() const;
  double max_abs() const;
  bool all_finite() const;

  bool operator==(const ParamVector&) const = default;

 private:
  void require_same_layout(const ParamVector& other, const char* op) const;

  ParamLayout layout_;
  std::vector<double> values_;
};

ParamVector operator+(ParamVector lhs, const ParamVector& rhs);
ParamVector operator-(ParamVector lhs, const ParamVector& rhs);
ParamVector operator*(ParamVector lhs, double scale);
ParamVector operator*(double scale, ParamVector rhs);

// Per-parameter importance, nonnegative, aligned with theta0's layout.
class FisherDiagonal {
 public:
  FisherDiagonal() = default;
  explicit FisherDiagonal(ParamLayout layout);
  FisherDiagonal(ParamVector values, std::size_t sample_count);

  const ParamVector& values() const { return values_; }
  const ParamLayout& layout() const { return values_.layout(); }
  std::size_t sample_count() const { return sample_count_; }
  bool empty() const { return sample_count_ == 0; }

  FisherDiagonal extended_to(const ParamLayout& larger) const;

 private:
  ParamVector values_;
  std::size_t sample_count_ = 0;
};

}  // namespace taskvec
