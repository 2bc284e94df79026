#pragma once

// AdamW with decoupled weight decay and the warm-up + cosine learning-rate
// schedule used by every training stage.

#include <cstddef>
#include <vector>

#include "prima/nn.hpp"

namespace prima {

/// Linear warm-up over the first ceil(warmup_fraction * total) steps, then
/// cosine decay to zero at `total`.
class WarmupCosine {
 public:
  WarmupCosine(double base_lr, std::size_t total_steps, double warmup_fraction);
  double operator()(std::size_t step) const;
  std::size_t warmup_steps() const { return warmup_; }
  std::size_t total_steps() const { return total_; }

 private:
  double base_;
  std::size_t total_;
  std::size_t warmup_;
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  /// Global gradient-norm clip; 0 disables clipping.
  double clip_norm = 0.0;
};

class AdamW {
 public:
  AdamW(std::vector<nn::Parameter*> params, AdamWConfig cfg);

  /// One update at learning rate `lr`; returns the pre-clip gradient norm.
  double step(double lr);
  std::size_t steps() const { return t_; }
  const std::vector<nn::Parameter*>& parameters() const { return params_; }

 private:
  std::vector<nn::Parameter*> params_;
  AdamWConfig cfg_;
  std::vector<Matrix> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace prima
