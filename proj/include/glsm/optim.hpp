#pragma once

#include <cstddef>
#include <vector>

#include "glsm/tensor.hpp"

namespace glsm {

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Global gradient-norm clip; 0 disables.
  double clip_norm = 0.0;
};

struct OptimizerState {
  double lr = 2e-4;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::size_t step = 0;
};

/// Adam with bias-corrected moments. Gradients are read from the parameters'
/// accumulated buffers; call `zero_grad()` between steps.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig config = {});

  void step();
  void zero_grad();

  const OptimizerState& state() const { return state_; }
  const AdamConfig& config() const { return config_; }
  void set_lr(double lr) { config_.lr = state_.lr = lr; }

 private:
  std::vector<Tensor> params_;
  AdamConfig config_;
  OptimizerState state_;
};

}  // namespace glsm
