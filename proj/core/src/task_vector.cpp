#include "taskvec/task_vector.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "taskvec/errors.hpp"

namespace taskvec {

std::string_view to_string(Variant variant) {
  switch (variant) {
    case Variant::FFT: return "FFT";
    case Variant::LoRA: return "LoRA";
    case Variant::IA3: return "IA3";
  }
  return "unknown";
}

Variant variant_from_string(std::string_view text) {
  if (text == "FFT" || text == "fft") return Variant::FFT;
  if (text == "LoRA" || text == "lora") return Variant::LoRA;
  if (text == "IA3" || text == "ia3") return Variant::IA3;
  throw ValidationError("unknown adapter variant '" + std::string(text) + "'");
}

std::size_t AdapterBlock::size() const {
  switch (kind) {
    case Kind::Dense: return rows * cols;
    case Kind::LowRank: return rows * rank + rank * cols;
    case Kind::RowScale: return rows;
  }
  return 0;
}

namespace {

bool in_scope(const LayoutEntry& e, Variant variant, const std::vector<std::string>& scope) {
  if (!scope.empty()) return std::find(scope.begin(), scope.end(), e.name) != scope.end();
  if (variant == Variant::FFT || e.is_head()) return true;
  return e.kind == EntryKind::BackboneWeight;
}

AdapterBlock::Kind block_kind(const LayoutEntry& e, Variant variant) {
  if (variant == Variant::FFT || e.is_head()) return AdapterBlock::Kind::Dense;
  if (e.kind != EntryKind::BackboneWeight || !e.is_matrix())
    throw LayoutError("entry '" + e.name + "' cannot carry a " + std::string(to_string(variant)) +
                      " adapter; only backbone weight matrices can");
  return variant == Variant::LoRA ? AdapterBlock::Kind::LowRank : AdapterBlock::Kind::RowScale;
}

}  // namespace

TaskVector TaskVector::zeros(Variant variant, const ParamLayout& layout,
                             const AdapterOptions& options) {
  if (variant == Variant::LoRA && options.rank == 0)
    throw ValidationError("LoRA rank must be at least 1");
  for (const auto& name : options.scope)
    if (!layout.find(name)) throw LayoutError("scope names unknown entry '" + name + "'");

  TaskVector tv;
  tv.variant_ = variant;
  tv.rank_ = variant == Variant::LoRA ? options.rank : 0;
  tv.layout_ = layout;

  std::size_t offset = 0;
  for (std::size_t i = 0; i < layout.num_entries(); ++i) {
    const auto& e = layout.entry(i);
    if (!in_scope(e, variant, options.scope)) continue;
    AdapterBlock block{block_kind(e, variant), i, e.rows(), e.cols(), tv.rank_, offset};
    offset += block.size();
    tv.blocks_.push_back(block);
  }
  tv.params_.assign(offset, 0.0);

  std::mt19937_64 rng(options.seed);
  for (const auto& block : tv.blocks_) {
    if (block.kind == AdapterBlock::Kind::RowScale) {
      std::fill_n(tv.params_.begin() + block.offset, block.rows, 1.0);
    } else if (block.kind == AdapterBlock::Kind::LowRank) {
      // B stays zero; A is Gaussian.
      const double std_a =
          options.a_init_std > 0.0 ? options.a_init_std : 1.0 / std::sqrt(double(block.cols));
      std::normal_distribution<double> normal(0.0, std_a);
      auto a = tv.params_.begin() + block.offset + block.rows * block.rank;
      for (std::size_t k = 0; k < block.rank * block.cols; ++k) a[k] = normal(rng);
    }
  }
  return tv;
}

TaskVector TaskVector::from_dense(const ParamVector& displacement) {
  TaskVector tv = zeros(Variant::FFT, displacement.layout());
  std::copy(displacement.values().begin(), displacement.values().end(), tv.params_.begin());
  return tv;
}

TaskVector TaskVector::from_parts(Variant variant, std::size_t rank, ParamLayout layout,
                                  std::vector<AdapterBlock> blocks, std::vector<double> params) {
  std::size_t expected = 0;
  for (const auto& b : blocks) {
    if (b.entry >= layout.num_entries()) throw LayoutError("adapter block names a missing entry");
    const auto& e = layout.entry(b.entry);
    if (b.rows != e.rows() || b.cols != e.cols())
      throw LayoutError("adapter block shape does not match entry '" + e.name + "'");
    if (b.offset != expected) throw LayoutError("adapter blocks are not contiguous");
    expected += b.size();
  }
  if (expected != params.size())
    throw LayoutError("adapter parameter count does not match its blocks");
  TaskVector tv;
  tv.variant_ = variant;
  tv.rank_ = rank;
  tv.layout_ = std::move(layout);
  tv.blocks_ = std::move(blocks);
  tv.params_ = std::move(params);
  return tv;
}

std::vector<std::string> TaskVector::scope() const {
  std::vector<std::string> names;
  for (const auto& b : blocks_) names.push_back(layout_.entry(b.entry).name);
  return names;
}

std::span<double> TaskVector::mutable_params() {
  cached_.reset();
  return params_;
}

void TaskVector::check_theta0(const ParamVector& theta0) const {
  if (!layout_.is_prefix_of(theta0.layout()))
    throw LayoutError("task vector layout is not compatible with theta0");
}

ParamVector TaskVector::materialize(const ParamVector& theta0) const {
  check_theta0(theta0);
  if (cached_) return cached_->extended_to(theta0.layout());

  ParamVector out(theta0.layout());
  for (const auto& b : blocks_) {
    auto dst = out.entry(b.entry);
    const double* p = params_.data() + b.offset;
    switch (b.kind) {
      case AdapterBlock::Kind::Dense:
        std::copy_n(p, b.rows * b.cols, dst.begin());
        break;
      case AdapterBlock::Kind::LowRank: {
        const double* B = p;
        const double* A = p + b.rows * b.rank;
        for (std::size_t i = 0; i < b.rows; ++i)
          for (std::size_t j = 0; j < b.cols; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < b.rank; ++k) acc += B[i * b.rank + k] * A[k * b.cols + j];
            dst[i * b.cols + j] = acc;
          }
        break;
      }
      case AdapterBlock::Kind::RowScale: {
        auto base = theta0.entry(b.entry);
        for (std::size_t i = 0; i < b.rows; ++i)
          for (std::size_t j = 0; j < b.cols; ++j)
            dst[i * b.cols + j] = base[i * b.cols + j] * (p[i] - 1.0);
        break;
      }
    }
  }
  return out;
}

std::vector<double> TaskVector::pullback(const ParamVector& dense_grad,
                                         const ParamVector& theta0) const {
  check_theta0(theta0);
  if (!(dense_grad.layout() == theta0.layout()))
    throw LayoutError("gradient layout does not match theta0");

  std::vector<double> out(params_.size(), 0.0);
  for (const auto& b : blocks_) {
    auto g = dense_grad.entry(b.entry);
    double* d = out.data() + b.offset;
    const double* p = params_.data() + b.offset;
    switch (b.kind) {
      case AdapterBlock::Kind::Dense:
        std::copy(g.begin(), g.end(), d);
        break;
      case AdapterBlock::Kind::LowRank: {
        const double* B = p;
        const double* A = p + b.rows * b.rank;
        double* dB = d;
        double* dA = d + b.rows * b.rank;
        // dB = G A^T, dA = B^T G
        for (std::size_t i = 0; i < b.rows; ++i)
          for (std::size_t k = 0; k < b.rank; ++k) {
            double acc = 0.0;
            for (std::size_t j = 0; j < b.cols; ++j) acc += g[i * b.cols + j] * A[k * b.cols + j];
            dB[i * b.rank + k] = acc;
          }
        for (std::size_t k = 0; k < b.rank; ++k)
          for (std::size_t j = 0; j < b.cols; ++j) {
            double acc = 0.0;
            for (std::size_t i = 0; i < b.rows; ++i) acc += B[i * b.rank + k] * g[i * b.cols + j];
            dA[k * b.cols + j] = acc;
          }
        break;
      }
      case AdapterBlock::Kind::RowScale: {
        auto base = theta0.entry(b.entry);
        for (std::size_t i = 0; i < b.rows; ++i) {
          double acc = 0.0;
          for (std::size_t j = 0; j < b.cols; ++j) acc += g[i * b.cols + j] * base[i * b.cols + j];
          d[i] = acc;
        }
        break;
      }
    }
  }
  return out;
}

void TaskVector::freeze(const ParamVector& theta0) {
  check_theta0(theta0);
  cached_.reset();
  // Materialise in this vector's own layout so later head additions only pad.
  const auto begin = theta0.values().begin();
  ParamVector trimmed(layout_, std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(
                                                                     layout_.total_len())));
  cached_ = materialize(trimmed);
}

}  // namespace taskvec
