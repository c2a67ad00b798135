#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "vtp/tensor.hpp"

namespace vtp {

/// A trainable tensor as seen by the optimizer.
struct ParamRef {
  std::string name;
  Tensor tensor;
  /// Decoupled weight decay applies only to projection/embedding weights,
  /// never to gates, biases or normalization parameters.
  bool decay = false;
};

struct AdamWHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

/// Adaptive-moment state with decoupled weight decay.
struct OptimizerState {
  AdamWHyper hyper;
  std::uint64_t step = 0;
  /// First and second moments keyed by parameter name.
  std::map<std::string, std::vector<double>> first_moment;
  std::map<std::string, std::vector<double>> second_moment;
};

/// One AdamW update of every parameter from its grad slot (a missing grad
/// counts as zero). Moments are created lazily on first sight of a name.
void optimizer_step(std::span<ParamRef> params, OptimizerState& state, double lr_now);

/// min_lr + (base_lr - min_lr) * (1 + cos(pi * step / total_steps)) / 2;
/// steps past the end clamp to min_lr.
double cosine_lr(std::int64_t step, std::int64_t total_steps, double base_lr, double min_lr);

}  // namespace vtp
