#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace taskvec {

struct AdamWOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Adam with decoupled weight decay over a flat parameter array.
class AdamW {
 public:
  AdamW(std::size_t num_params, AdamWOptions options);

  void step(std::span<double> params, std::span<const double> grad);

  const AdamWOptions& options() const { return options_; }
  std::size_t steps() const { return steps_; }

 private:
  AdamWOptions options_;
  std::vector<double> m_;
  std::vector<double> v_;
  std::size_t steps_ = 0;
};

}  // namespace taskvec
