#pragma once

#include <span>
#include <vector>

#include "splab/tensor.hpp"

namespace splab {

struct AdamConfig {
  float lr = 3e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

/// First/second moment accumulators, one buffer per parameter.
struct AdamState {
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
  long step = 0;

  static AdamState for_params(std::span<const Tensor> params);
};

/// One bias-corrected Adam update using each parameter's accumulated gradient.
/// Parameters without a gradient buffer are treated as having zero gradient.
/// Throws NumericalError (naming the parameter index) on a non-finite gradient;
/// parameters are left untouched in that case.
void adam_step(std::span<Tensor> params, AdamState& state, const AdamConfig& config);

/// ema <- decay * ema + (1 - decay) * online, elementwise. decay in [0, 1).
void ema_update(std::span<Tensor> ema, std::span<const Tensor> online, double decay);

}  // namespace splab
