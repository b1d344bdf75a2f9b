#pragma once

#include <span>
#include <string>
#include <vector>

#include "splab/schedule.hpp"
#include "splab/tensor.hpp"

namespace splab {

/// Uniformly weighted empirical distribution over data points, stored as a
/// [N, ...] tensor, with optional class labels (one per point).
struct FiniteDataset {
  Tensor points;
  std::vector<int> labels;
  int num_classes = 0;
  std::vector<std::string> class_names;

  std::size_t size() const { return points.dim(0); }
  std::size_t dim() const { return points.per_sample(); }
  void validate() const;
};

/// Isotropic Gaussian mixture: component k is N(means[k], sigmas[k]^2 I).
struct GaussianMixture {
  std::vector<std::vector<double>> means;
  std::vector<double> sigmas;
  std::vector<double> weights;

  void validate() const;
};

/// Minimum-MSE v prediction E[v | x_t] when x0 is drawn from the dataset.
/// Posterior weights are computed in double precision with log-sum-exp.
/// Throws ContractError when alpha_bar(t) == 1.
Tensor posterior_optimal_v(const Tensor& x_t, int t, const FiniteDataset& data, const NoiseSchedule& s);
/// E[x0 | x_t] under the dataset, for each row of x_t.
std::vector<std::vector<double>> posterior_mean_x0(const Tensor& x_t, int t, const FiniteDataset& data,
                                                   const NoiseSchedule& s);

/// Closed-form E[v | x_t] when x0 follows a Gaussian mixture.
Tensor gaussian_mixture_v(const Tensor& x_t, int t, const GaussianMixture& mixture, const NoiseSchedule& s);
std::vector<std::vector<double>> gaussian_mixture_mean_x0(const Tensor& x_t, int t, const GaussianMixture& mixture,
                                                          const NoiseSchedule& s);

/// The minimizer of the summed squared distance to every sample (their mean).
Tensor mse_midpoint(std::span<const Tensor> samples);

/// 2 E|a - b| - E|a - a'| - E|b - b'| with all-pairs (V-statistic) averages
/// over rows of [N, ...] tensors. Requires at least 2 rows on each side.
double energy_distance(const Tensor& a, const Tensor& b);

/// Squared maximum mean discrepancy with a Gaussian kernel (biased estimator,
/// always >= 0). A non-positive bandwidth selects the median pairwise distance
/// of the pooled sample.
double mmd_rbf(const Tensor& a, const Tensor& b, double bandwidth = 0.0);

/// Fraction of reference rows that fall inside at least one generated row's
/// k-nearest-neighbour ball (radius measured within the generated set).
double nearest_neighbor_recall(const Tensor& reference, const Tensor& generated, int k = 3);

struct MetricReport {
  double energy_distance = 0.0;
  double mmd_rbf = 0.0;
  double nearest_neighbor_recall = 0.0;
};

MetricReport compute_metrics(const Tensor& reference, const Tensor& generated);

}  // namespace splab
