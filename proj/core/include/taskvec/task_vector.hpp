#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "taskvec/param.hpp"

namespace taskvec {

enum class Variant { FFT, LoRA, IA3 };

std::string_view to_string(Variant variant);
Variant variant_from_string(std::string_view text);

// One adapted layout entry and where its trainable numbers live inside the
// task vector's flat parameter array.
struct AdapterBlock {
  enum class Kind { Dense, LowRank, RowScale };

  Kind kind = Kind::Dense;
  std::size_t entry = 0;  // index into the task vector's layout
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t rank = 0;    // LowRank only
  std::size_t offset = 0;  // into TaskVector::params()

  // Dense: rows*cols. LowRank: B (rows x rank) followed by A (rank x cols).
  // RowScale: one multiplier per row.
  std::size_t size() const;
};

struct AdapterOptions {
  std::size_t rank = 4;
  std::uint64_t seed = 0;
  // Standard deviation of the Gaussian used for LoRA's A factor. Zero selects
  // 1/sqrt(cols) per matrix.
  double a_init_std = 0.0;
  // Restrict adaptation to these entry names; empty means the variant's
  // default scope (everything for FFT, backbone matrices plus dense heads for
  // LoRA and IA3).
  std::vector<std::string> scope;
};

// Displacement tau from theta0 in one of three parametrisations. A freshly
// created task vector always materialises to exactly zero.
class TaskVector {
 public:
  TaskVector() = default;

  static TaskVector zeros(Variant variant, const ParamLayout& layout,
                          const AdapterOptions& options = {});
  // Dense task vector holding `displacement` verbatim.
  static TaskVector from_dense(const ParamVector& displacement);
  // Rebuild from serialized parts; validates sizes.
  static TaskVector from_parts(Variant variant, std::size_t rank, ParamLayout layout,
                               std::vector<AdapterBlock> blocks, std::vector<double> params);

  Variant variant() const { return variant_; }
  std::size_t rank() const { return rank_; }
  const ParamLayout& layout() const { return layout_; }
  const std::vector<AdapterBlock>& blocks() const { return blocks_; }
  std::vector<std::string> scope() const;

  std::span<const double> params() const { return params_; }
  // Mutable access drops any cached materialisation.
  std::span<double> mutable_params();
  std::size_t num_params() const { return params_.size(); }

  // Dense displacement expressed in theta0's layout, which must extend the
  // layout this vector was created for. Entries outside the scope are zero.
  ParamVector materialize(const ParamVector& theta0) const;

  // Chain rule from a dense gradient (theta0's layout) back to this vector's
  // own parameters.
  std::vector<double> pullback(const ParamVector& dense_grad, const ParamVector& theta0) const;

  // Cache the current materialisation; used once training of the vector is over.
  void freeze(const ParamVector& theta0);
  bool frozen() const { return cached_.has_value(); }

 private:
  void check_theta0(const ParamVector& theta0) const;

  Variant variant_ = Variant::FFT;
  std::size_t rank_ = 0;
  ParamLayout layout_;
  std::vector<AdapterBlock> blocks_;
  std::vector<double> params_;
  std::optional<ParamVector> cached_;
};

}  // namespace taskvec
