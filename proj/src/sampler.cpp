#include "splab/sampler.hpp"

#include <cmath>
#include <string>

namespace splab {

void SamplerConfig::validate(int timesteps) const {
  if (steps < 1 || steps > timesteps) {
    throw ConfigError("sampler: steps must lie in [1, " + std::to_string(timesteps) + "]");
  }
  if (!(cfg_scale >= 0.0)) throw ConfigError("sampler: cfg_scale must be non-negative");
  if (!(rescale_phi >= 0.0 && rescale_phi <= 1.0)) throw ConfigError("sampler: rescale_phi must lie in [0, 1]");
}

std::vector<int> make_timestep_grid(int steps, int timesteps) {
  if (timesteps < 1) throw ConfigError("timestep grid: T must be positive");
  if (steps < 1 || steps > timesteps) {
    throw ConfigError("timestep grid: steps must lie in [1, " + std::to_string(timesteps) + "]");
  }
  std::vector<int> grid(static_cast<std::size_t>(steps));
  const double spacing = static_cast<double>(timesteps) / static_cast<double>(steps);
  for (int i = 0; i < steps; ++i) {
    grid[static_cast<std::size_t>(i)] = static_cast<int>(std::lround(timesteps - i * spacing));
  }
  return grid;
}

Tensor ddim_transition(const Tensor& x_t, const Tensor& v_hat, int t, int t_next, const NoiseSchedule& s) {
  if (x_t.shape() != v_hat.shape()) throw DimensionError("ddim_step: x_t and v_hat shapes differ");
  const double a = s.sqrt_alpha_bar(t);
  const double b = s.sqrt_one_minus_alpha_bar(t);
  double a_next = 1.0;
  double b_next = 0.0;
  if (t_next != 0) {
    a_next = s.sqrt_alpha_bar(t_next);
    b_next = s.sqrt_one_minus_alpha_bar(t_next);
  }
  // x' = a'(a x - b v) + b'(a v + b x) = (a'a + b'b) x + (b'a - a'b) v
  const auto cx = static_cast<float>(a_next * a + b_next * b);
  const auto cv = static_cast<float>(b_next * a - a_next * b);
  const std::size_t rows = x_t.rank() == 0 ? 1 : x_t.dim(0);
  const std::vector<float> kx(rows, cx), kv(rows, cv);
  return lincomb_rows(x_t, kx, v_hat, kv);
}

Tensor ddim_step(const Tensor& x_t, const Tensor& v_hat, int t, int t_next, const NoiseSchedule& s) {
  s.check_timestep(t);
  if (t_next != 0) s.check_timestep(t_next);
  if (t <= t_next) {
    throw ContractError("ddim_step: require t > t_next (got " + std::to_string(t) + " -> " +
                        std::to_string(t_next) + ")");
  }
  return ddim_transition(x_t, v_hat, t, t_next, s);
}

Tensor cfg_combine(const Tensor& v_cond, const Tensor& v_uncond, double w) {
  if (v_cond.shape() != v_uncond.shape()) throw DimensionError("cfg_combine: shape mismatch");
  Tensor out = Tensor::zeros(v_cond.shape());
  auto o = out.data();
  auto c = v_cond.data();
  auto u = v_uncond.data();
  const auto wf = static_cast<float>(w);
  for (std::size_t i = 0; i < o.size(); ++i) {
    o[i] = w == 1.0 ? c[i] : (w == 0.0 ? u[i] : u[i] + wf * (c[i] - u[i]));
  }
  return out;
}

namespace {

double sample_std(std::span<const float> v) {
  double m = 0.0;
  for (float x : v) m += x;
  m /= static_cast<double>(v.size());
  double var = 0.0;
  for (float x : v) var += (x - m) * (x - m);
  return std::sqrt(var / static_cast<double>(v.size()));
}

}  // namespace

Tensor cfg_rescale(const Tensor& v_guided, const Tensor& v_cond, double phi) {
  if (v_guided.shape() != v_cond.shape()) throw DimensionError("cfg_rescale: shape mismatch");
  if (!(phi >= 0.0 && phi <= 1.0)) throw ContractError("cfg_rescale: phi must lie in [0, 1]");
  Tensor out = v_guided.detach();
  if (phi == 0.0) return out;
  const std::size_t rows = v_guided.dim(0), per = v_guided.per_sample();
  auto o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const auto g = v_guided.data().subspan(r * per, per);
    const double std_guided = sample_std(g);
    if (std_guided == 0.0) continue;
    const double ratio = sample_std(v_cond.data().subspan(r * per, per)) / std_guided;
    for (std::size_t j = 0; j < per; ++j) {
      const double x = g[j];
      o[r * per + j] = static_cast<float>(phi * x * ratio + (1.0 - phi) * x);
    }
  }
  return out;
}

SampleTrajectory sample_from(const DenoiserModel& model, const Tensor& x_T, std::span<const Conditioning> c,
                             const SamplerConfig& cfg, const NoiseSchedule& s) {
  cfg.validate(s.timesteps());
  const std::size_t batch = x_T.dim(0);
  if (c.size() != batch) throw ContractError("sample: need one conditioning per sample");
  bool any_conditional = false;
  for (const auto& ci : c) any_conditional = any_conditional || !ci.is_null();
  const bool guided = any_conditional && cfg.cfg_scale != 1.0;
  const bool uncond_only = any_conditional && cfg.cfg_scale == 0.0;
  const std::vector<Conditioning> null_c(batch, Conditioning::null());

  const auto grid = make_timestep_grid(cfg.steps, s.timesteps());
  SampleTrajectory traj;
  Tensor x = x_T.detach();
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const int t = grid[i];
    const int t_next = i + 1 < grid.size() ? grid[i + 1] : 0;
    const std::vector<int> ts(batch, t);
    Tensor v;
    if (uncond_only) {
      v = model.forward(x, ts, null_c);
      traj.nfe += 1;
    } else if (guided) {
      const Tensor v_cond = model.forward(x, ts, c);
      const Tensor v_uncond = model.forward(x, ts, null_c);
      traj.nfe += 2;
      v = cfg_combine(v_cond, v_uncond, cfg.cfg_scale);
      if (cfg.rescale_phi > 0.0) v = cfg_rescale(v, v_cond, cfg.rescale_phi);
    } else {
      v = model.forward(x, ts, c);
      traj.nfe += 1;
    }
    Tensor x_next = ddim_step(x, v, t, t_next, s);
    if (cfg.record_trajectory) {
      traj.steps.push_back(TrajectoryStep{t, t_next, x, v, v_to_x0(v, x, t, s)});
    }
    x = x_next;
  }
  traj.sample = x;
  return traj;
}

SampleTrajectory sample(const DenoiserModel& model, std::span<const Conditioning> c, const SamplerConfig& cfg,
                        const NoiseSchedule& s, Rng& rng) {
  Shape shape = model.sample_shape();
  shape.insert(shape.begin(), c.size());
  const Tensor x_T = Tensor::randn(shape, rng);
  return sample_from(model, x_T, c, cfg, s);
}

}  // namespace splab
