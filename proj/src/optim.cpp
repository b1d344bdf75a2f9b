#include "splab/optim.hpp"

#include <cmath>
#include <string>

namespace splab {

AdamState AdamState::for_params(std::span<const Tensor> params) {
  AdamState state;
  for (const auto& p : params) {
    state.m.emplace_back(p.numel(), 0.0f);
    state.v.emplace_back(p.numel(), 0.0f);
  }
  return state;
}

void adam_step(std::span<Tensor> params, AdamState& state, const AdamConfig& config) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ContractError("adam_step: optimizer state does not match parameter list");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) continue;
    for (float g : params[i].grad()) {
      if (!std::isfinite(g)) {
        throw NumericalError("adam_step: non-finite gradient in parameter " + std::to_string(i) + " (shape " +
                             shape_str(params[i].shape()) + ") at step " + std::to_string(state.step + 1));
      }
    }
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(static_cast<double>(config.beta1), static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(static_cast<double>(config.beta2), static_cast<double>(state.step));
  const float step_size = static_cast<float>(config.lr / bc1);
  const float bc2_sqrt = static_cast<float>(std::sqrt(bc2));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) continue;
    auto p = params[i].data();
    auto g = params[i].grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != p.size()) throw ContractError("adam_step: moment buffer size mismatch");
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = config.beta1 * m[j] + (1.0f - config.beta1) * g[j];
      v[j] = config.beta2 * v[j] + (1.0f - config.beta2) * g[j] * g[j];
      p[j] -= step_size * m[j] / (std::sqrt(v[j]) / bc2_sqrt + config.eps);
    }
  }
}

void ema_update(std::span<Tensor> ema, std::span<const Tensor> online, double decay) {
  if (!(decay >= 0.0 && decay < 1.0)) throw ContractError("ema_update: decay must lie in [0, 1)");
  if (ema.size() != online.size()) throw ContractError("ema_update: parameter lists differ in length");
  for (std::size_t i = 0; i < ema.size(); ++i) {
    auto e = ema[i].data();
    auto o = online[i].data();
    if (e.size() != o.size()) throw DimensionError("ema_update: parameter " + std::to_string(i) + " size mismatch");
    for (std::size_t j = 0; j < e.size(); ++j) {
      e[j] = static_cast<float>(decay * e[j] + (1.0 - decay) * o[j]);
    }
  }
}

}  // namespace splab
