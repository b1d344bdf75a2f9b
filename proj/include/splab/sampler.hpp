#pragma once

#include <span>
#include <vector>

#include "splab/models.hpp"
#include "splab/rng.hpp"
#include "splab/schedule.hpp"
#include "splab/tensor.hpp"

namespace splab {

struct SamplerConfig {
  int steps = 25;
  /// Guidance scale w. 1 queries the conditional model only; 0 reduces to the
  /// unconditional prediction.
  double cfg_scale = 1.0;
  /// Guidance rescale blend factor in [0, 1].
  double rescale_phi = 0.0;
  bool record_trajectory = false;

  void validate(int timesteps) const;
};

struct TrajectoryStep {
  int t = 0;
  int t_next = 0;
  Tensor x_t;
  Tensor v_hat;
  Tensor x0_hat;
};

struct SampleTrajectory {
  std::vector<TrajectoryStep> steps;  // filled only when record_trajectory is set
  Tensor sample;
  long nfe = 0;  // model evaluations, counting each batched query once
};

/// Strictly decreasing grid starting at T with spacing T/steps (rounded):
/// round(T - i * T / steps) for i = 0..steps-1. The final transition of a
/// sampling run goes from the last grid entry to t = 0 (x0 itself).
std::vector<int> make_timestep_grid(int steps, int timesteps);

/// Deterministic DDIM transition t -> t_next (t_next = 0 returns x0_hat).
/// Requires t > t_next. Uses the closed-form rotation of (x_t, v) rather than
/// going through x0_hat and eps_hat explicitly.
Tensor ddim_step(const Tensor& x_t, const Tensor& v_hat, int t, int t_next, const NoiseSchedule& s);
/// The same transition without ordering checks (any t_next in [0, T]).
Tensor ddim_transition(const Tensor& x_t, const Tensor& v_hat, int t, int t_next, const NoiseSchedule& s);

/// v_uncond + w * (v_cond - v_uncond)
Tensor cfg_combine(const Tensor& v_cond, const Tensor& v_uncond, double w);
/// Blends the guided prediction with a copy rescaled to the per-sample std of
/// v_cond: phi * v_guided * (std_cond / std_guided) + (1 - phi) * v_guided.
/// Samples whose guided std is zero are returned unchanged.
Tensor cfg_rescale(const Tensor& v_guided, const Tensor& v_cond, double phi);

/// Deterministic DDIM sampling from x_T ~ N(0, I). One conditioning per sample;
/// the batch size is c.size().
SampleTrajectory sample(const DenoiserModel& model, std::span<const Conditioning> c, const SamplerConfig& cfg,
                        const NoiseSchedule& s, Rng& rng);
/// Same, starting from a given x_T.
SampleTrajectory sample_from(const DenoiserModel& model, const Tensor& x_T, std::span<const Conditioning> c,
                             const SamplerConfig& cfg, const NoiseSchedule& s);

}  // namespace splab
