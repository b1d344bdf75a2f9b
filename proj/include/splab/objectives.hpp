#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "splab/models.hpp"
#include "splab/rng.hpp"
#include "splab/schedule.hpp"
#include "splab/tensor.hpp"

namespace splab {

/// t' = t +/- k with equal probability.
struct DeltaStep {
  int k = 40;
};
/// t' = round(N(t, sigma^2)).
struct GaussianAroundT {
  double sigma = 100.0;
};
/// t' ~ U{1..T}.
struct UniformInt {};

using TPrimeSampler = std::variant<DeltaStep, GaussianAroundT, UniformInt>;

enum class FeatureDistance { Mse, Mae };

std::string to_string(const TPrimeSampler& sampler);
std::string to_string(FeatureDistance d);
/// Accepts "uniform", "delta:<k>", "gaussian:<sigma>".
TPrimeSampler parse_tprime_sampler(const std::string& text);
FeatureDistance parse_feature_distance(const std::string& text);

struct SpConfig {
  FeatureTap tap = FeatureTap::MidOnly;
  TPrimeSampler tprime = UniformInt{};
  FeatureDistance distance = FeatureDistance::Mse;
  double cond_dropout_prob = 0.1;

  void validate() const;
};

struct LossBatchResult {
  Tensor loss;
  std::map<std::string, double> aux;

  double value() const { return loss.item(); }
};

/// Per-element draws shared by both objectives.
struct DiffusionDraws {
  std::vector<int> t;
  Tensor eps;
};

/// t ~ U{1..T} per element, then eps ~ N(0, I) with the shape of x0.
DiffusionDraws draw_diffusion(const Tensor& x0, const NoiseSchedule& s, Rng& rng);

/// MSE between the model's v prediction and the analytic v target.
LossBatchResult mse_loss(const DenoiserModel& model, const Tensor& x0, std::span<const Conditioning> c,
                         Rng& rng, const NoiseSchedule& s);
LossBatchResult mse_loss_at(const DenoiserModel& model, const Tensor& x0, std::span<const Conditioning> c,
                            const DiffusionDraws& draws, const NoiseSchedule& s);

/// Draws t' for a given t; never returns t (see the collision rule in the
/// implementation). The result always lies in [1, T].
int sample_tprime(int t, const SpConfig& cfg, int timesteps, Rng& rng);

/// Self-perceptual loss. `frozen` must be frozen (ContractError otherwise).
LossBatchResult sp_loss(const DenoiserModel& online, const DenoiserModel& frozen, const Tensor& x0,
                        std::span<const Conditioning> c, Rng& rng, const NoiseSchedule& s, const SpConfig& cfg);
/// Same with explicit draws; `tprime` may be set freely (including t' == t).
LossBatchResult sp_loss_at(const DenoiserModel& online, const DenoiserModel& frozen, const Tensor& x0,
                           std::span<const Conditioning> c, const DiffusionDraws& draws,
                           std::span<const int> tprime, const NoiseSchedule& s, const SpConfig& cfg);

/// The self-perceptual loss for a given v prediction at x_t = forward(x0, eps, t).
Tensor sp_loss_from_prediction(const DenoiserModel& frozen, const Tensor& x0, const Tensor& eps, const Tensor& v_hat,
                               std::span<const int> t, std::span<const int> tprime, std::span<const Conditioning> c,
                               const NoiseSchedule& s, const SpConfig& cfg);

/// Intermediate values of the self-perceptual construction for a given v prediction.
struct SpRenoised {
  Tensor x_t;
  Tensor x0_hat;
  Tensor eps_hat;
  Tensor x_tprime;       // forward(x0, eps, t')
  Tensor x_tprime_hat;   // forward(x0_hat, eps_hat, t')
};

SpRenoised sp_renoise(const Tensor& x0, const Tensor& eps, const Tensor& v_hat, std::span<const int> t,
                      std::span<const int> tprime, const NoiseSchedule& s);

/// Feature-space distance averaged over taps with equal weight.
Tensor feature_distance(std::span<const Tensor> predicted, std::span<const Tensor> target, FeatureDistance d);

/// With probability p returns the null conditioning, otherwise c.
Conditioning apply_cond_dropout(Conditioning c, double p, Rng& rng);

}  // namespace splab
