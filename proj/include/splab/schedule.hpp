#pragma once

#include <iosfwd>
#include <span>
#include <vector>

#include "splab/tensor.hpp"

namespace splab {

/// Discrete noise schedule over timesteps t = 1..T with zero terminal SNR.
/// Immutable after construction.
class NoiseSchedule {
 public:
  /// Linear betas in [beta_start, beta_end], then the sqrt(alpha_bar) curve is
  /// shifted and scaled so that its first value is preserved and the last is 0.
  static NoiseSchedule zero_terminal_snr(int timesteps = 1000, double beta_start = 0.00085,
                                         double beta_end = 0.012);
  /// Schedule from explicit alpha_bar values (t = 1..T in order). Used for
  /// hypothetical endpoints in tests; values must lie in [0, 1].
  static NoiseSchedule from_alpha_bar(std::vector<double> alpha_bar);

  int timesteps() const { return static_cast<int>(alpha_bar_.size()); }
  double alpha_bar(int t) const { return alpha_bar_[index(t)]; }
  double sqrt_alpha_bar(int t) const { return sqrt_alpha_bar_[index(t)]; }
  double sqrt_one_minus_alpha_bar(int t) const { return sqrt_one_minus_alpha_bar_[index(t)]; }
  double snr(int t) const;

  std::span<const double> alpha_bar_table() const { return alpha_bar_; }
  std::span<const double> sqrt_alpha_bar_table() const { return sqrt_alpha_bar_; }
  std::span<const double> sqrt_one_minus_alpha_bar_table() const { return sqrt_one_minus_alpha_bar_; }

  /// Throws ContractError when t is outside [1, T].
  void check_timestep(int t) const;

  /// CSV with columns t, alpha_bar, snr.
  void write_csv(std::ostream& os) const;

 private:
  std::size_t index(int t) const;
  std::vector<double> alpha_bar_;
  std::vector<double> sqrt_alpha_bar_;
  std::vector<double> sqrt_one_minus_alpha_bar_;
};

// Coefficient algebra. Each function takes either a single timestep shared by
// every sample or one timestep per leading-dimension index. Results are
// differentiable in their tensor arguments.

/// sqrt(ab) * x0 + sqrt(1 - ab) * eps
Tensor forward_diffuse(const Tensor& x0, const Tensor& eps, std::span<const int> t, const NoiseSchedule& s);
Tensor forward_diffuse(const Tensor& x0, const Tensor& eps, int t, const NoiseSchedule& s);
/// sqrt(ab) * eps - sqrt(1 - ab) * x0
Tensor v_target(const Tensor& x0, const Tensor& eps, std::span<const int> t, const NoiseSchedule& s);
Tensor v_target(const Tensor& x0, const Tensor& eps, int t, const NoiseSchedule& s);
/// sqrt(ab) * x_t - sqrt(1 - ab) * v
Tensor v_to_x0(const Tensor& v, const Tensor& x_t, std::span<const int> t, const NoiseSchedule& s);
Tensor v_to_x0(const Tensor& v, const Tensor& x_t, int t, const NoiseSchedule& s);
/// sqrt(ab) * v + sqrt(1 - ab) * x_t
Tensor v_to_eps(const Tensor& v, const Tensor& x_t, std::span<const int> t, const NoiseSchedule& s);
Tensor v_to_eps(const Tensor& v, const Tensor& x_t, int t, const NoiseSchedule& s);

}  // namespace splab
