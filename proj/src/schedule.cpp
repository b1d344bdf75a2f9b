#include "splab/schedule.hpp"

#include <cmath>
#include <ostream>
#include <iomanip>
#include <limits>
#include <string>

namespace splab {

NoiseSchedule NoiseSchedule::zero_terminal_snr(int timesteps, double beta_start, double beta_end) {
  if (timesteps < 2) throw ConfigError("schedule: need at least 2 timesteps");
  if (!(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0)) {
    throw ConfigError("schedule: require 0 < beta_start < beta_end < 1");
  }
  const auto n = static_cast<std::size_t>(timesteps);
  std::vector<double> sqrt_ab(n);
  double cumprod = 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double beta = beta_start + (beta_end - beta_start) * static_cast<double>(i) / static_cast<double>(n - 1);
    cumprod *= 1.0 - beta;
    sqrt_ab[i] = std::sqrt(cumprod);
  }
  const double first = sqrt_ab.front();
  const double last = sqrt_ab.back();
  for (auto& v : sqrt_ab) v = (v - last) * first / (first - last);
  sqrt_ab.front() = first;
  sqrt_ab.back() = 0.0;

  NoiseSchedule s;
  s.sqrt_alpha_bar_ = sqrt_ab;
  s.alpha_bar_.resize(n);
  s.sqrt_one_minus_alpha_bar_.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    s.alpha_bar_[i] = sqrt_ab[i] * sqrt_ab[i];
    s.sqrt_one_minus_alpha_bar_[i] = std::sqrt(1.0 - s.alpha_bar_[i]);
  }
  return s;
}

NoiseSchedule NoiseSchedule::from_alpha_bar(std::vector<double> alpha_bar) {
  if (alpha_bar.empty()) throw ConfigError("schedule: empty alpha_bar table");
  NoiseSchedule s;
  for (double a : alpha_bar) {
    if (!(a >= 0.0 && a <= 1.0)) throw ConfigError("schedule: alpha_bar values must lie in [0, 1]");
    s.sqrt_alpha_bar_.push_back(std::sqrt(a));
    s.sqrt_one_minus_alpha_bar_.push_back(std::sqrt(1.0 - a));
  }
  s.alpha_bar_ = std::move(alpha_bar);
  return s;
}

double NoiseSchedule::snr(int t) const {
  const double a = alpha_bar(t);
  if (a >= 1.0) return std::numeric_limits<double>::infinity();
  return a / (1.0 - a);
}

void NoiseSchedule::check_timestep(int t) const {
  if (t < 1 || t > timesteps()) {
    throw ContractError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(timesteps()) + "]");
  }
}

std::size_t NoiseSchedule::index(int t) const {
  check_timestep(t);
  return static_cast<std::size_t>(t - 1);
}

void NoiseSchedule::write_csv(std::ostream& os) const {
  os << "t,alpha_bar,snr\n" << std::setprecision(17);
  for (int t = 1; t <= timesteps(); ++t) os << t << ',' << alpha_bar(t) << ',' << snr(t) << '\n';
}

namespace {

struct RowCoefficients {
  std::vector<float> signal;  // sqrt(ab)
  std::vector<float> noise;   // sqrt(1 - ab)
};

RowCoefficients coefficients(const Tensor& like, std::span<const int> t, const NoiseSchedule& s) {
  if (like.rank() == 0 || t.size() != like.dim(0)) {
    throw DimensionError("schedule: " + std::to_string(t.size()) + " timesteps for leading dimension of " +
                         shape_str(like.shape()));
  }
  RowCoefficients c;
  c.signal.reserve(t.size());
  c.noise.reserve(t.size());
  for (int ti : t) {
    c.signal.push_back(static_cast<float>(s.sqrt_alpha_bar(ti)));
    c.noise.push_back(static_cast<float>(s.sqrt_one_minus_alpha_bar(ti)));
  }
  return c;
}

std::vector<float> negated(std::vector<float> v) {
  for (auto& x : v) x = -x;
  return v;
}

std::vector<int> repeat_timestep(const Tensor& like, int t, const NoiseSchedule& s) {
  s.check_timestep(t);
  if (like.rank() == 0) throw DimensionError("schedule: tensor needs a leading dimension");
  return std::vector<int>(like.dim(0), t);
}

}  // namespace

Tensor forward_diffuse(const Tensor& x0, const Tensor& eps, std::span<const int> t, const NoiseSchedule& s) {
  const auto c = coefficients(x0, t, s);
  return lincomb_rows(x0, c.signal, eps, c.noise);
}

Tensor v_target(const Tensor& x0, const Tensor& eps, std::span<const int> t, const NoiseSchedule& s) {
  const auto c = coefficients(x0, t, s);
  return lincomb_rows(eps, c.signal, x0, negated(c.noise));
}

Tensor v_to_x0(const Tensor& v, const Tensor& x_t, std::span<const int> t, const NoiseSchedule& s) {
  const auto c = coefficients(v, t, s);
  return lincomb_rows(x_t, c.signal, v, negated(c.noise));
}

Tensor v_to_eps(const Tensor& v, const Tensor& x_t, std::span<const int> t, const NoiseSchedule& s) {
  const auto c = coefficients(v, t, s);
  return lincomb_rows(v, c.signal, x_t, c.noise);
}

Tensor forward_diffuse(const Tensor& x0, const Tensor& eps, int t, const NoiseSchedule& s) {
  return forward_diffuse(x0, eps, repeat_timestep(x0, t, s), s);
}

Tensor v_target(const Tensor& x0, const Tensor& eps, int t, const NoiseSchedule& s) {
  return v_target(x0, eps, repeat_timestep(x0, t, s), s);
}

Tensor v_to_x0(const Tensor& v, const Tensor& x_t, int t, const NoiseSchedule& s) {
  return v_to_x0(v, x_t, repeat_timestep(v, t, s), s);
}

Tensor v_to_eps(const Tensor& v, const Tensor& x_t, int t, const NoiseSchedule& s) {
  return v_to_eps(v, x_t, repeat_timestep(v, t, s), s);
}

}  // namespace splab
