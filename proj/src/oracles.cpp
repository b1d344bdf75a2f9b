#include "splab/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace splab {

void FiniteDataset::validate() const {
  if (!points.defined() || points.rank() < 2 || points.dim(0) == 0) {
    throw ContractError("dataset: need a non-empty [N, ...] tensor");
  }
  for (float v : points.data()) {
    if (!std::isfinite(v)) throw ContractError("dataset: non-finite value");
  }
}

void GaussianMixture::validate() const {
  if (means.empty() || means.size() != sigmas.size() || means.size() != weights.size()) {
    throw ContractError("mixture: means, sigmas and weights must be non-empty and of equal length");
  }
  double total = 0.0;
  for (std::size_t k = 0; k < means.size(); ++k) {
    if (means[k].size() != means[0].size()) throw ContractError("mixture: component dimensions differ");
    if (!(sigmas[k] >= 0.0)) throw ContractError("mixture: sigma must be non-negative");
    if (!(weights[k] >= 0.0)) throw ContractError("mixture: weights must be non-negative");
    total += weights[k];
  }
  if (std::abs(total - 1.0) > 1e-9) throw ContractError("mixture: weights must sum to 1");
}

namespace {

void require_noisy(int t, const NoiseSchedule& s, const char* what) {
  if (s.alpha_bar(t) >= 1.0) {
    throw ContractError(std::string(what) + ": alpha_bar(t) == 1 leaves the posterior undefined");
  }
}

double log_sum_exp(std::span<const double> v) {
  const double m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) return m;
  double acc = 0.0;
  for (double x : v) acc += std::exp(x - m);
  return m + std::log(acc);
}

Tensor v_from_mean(const Tensor& x_t, const std::vector<std::vector<double>>& mean_x0, int t, const NoiseSchedule& s) {
  const double a = s.sqrt_alpha_bar(t);
  const double b = s.sqrt_one_minus_alpha_bar(t);
  const std::size_t per = x_t.per_sample();
  Tensor out = Tensor::zeros(x_t.shape());
  auto o = out.data();
  auto x = x_t.data();
  for (std::size_t r = 0; r < mean_x0.size(); ++r) {
    for (std::size_t j = 0; j < per; ++j) {
      const double m = mean_x0[r][j];
      const double eps = (x[r * per + j] - a * m) / b;
      o[r * per + j] = static_cast<float>(a * eps - b * m);
    }
  }
  return out;
}

double sq_dist(const float* a, const float* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return acc;
}

void require_rows(const Tensor& a, const Tensor& b, std::size_t min_rows, const char* what) {
  if (!a.defined() || !b.defined() || a.rank() < 2 || b.rank() < 2 || a.per_sample() != b.per_sample()) {
    throw DimensionError(std::string(what) + ": need [N, ...] tensors with equal row size");
  }
  if (a.dim(0) < min_rows || b.dim(0) < min_rows) {
    throw ContractError(std::string(what) + ": need at least " + std::to_string(min_rows) + " rows per set");
  }
}

/// Mean of f(||x_i - y_j||^2) over all pairs.
template <typename F>
double mean_pairwise(const Tensor& x, const Tensor& y, F f) {
  const std::size_t n = x.dim(0), m = y.dim(0), d = x.per_sample();
  const float* xd = x.data().data();
  const float* yd = y.data().data();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < m; ++j) row += f(sq_dist(xd + i * d, yd + j * d, d));
    acc += row;
  }
  return acc / (static_cast<double>(n) * static_cast<double>(m));
}

}  // namespace

std::vector<std::vector<double>> posterior_mean_x0(const Tensor& x_t, int t, const FiniteDataset& data,
                                                   const NoiseSchedule& s) {
  data.validate();
  require_noisy(t, s, "posterior_optimal_v");
  if (x_t.per_sample() != data.dim()) throw DimensionError("posterior_optimal_v: x_t does not match the data dimension");
  const double a = s.sqrt_alpha_bar(t);
  const double var = 1.0 - s.alpha_bar(t);
  const std::size_t rows = x_t.dim(0), per = data.dim(), n = data.size();
  auto x = x_t.data();
  auto pts = data.points.data();
  std::vector<std::vector<double>> out(rows, std::vector<double>(per, 0.0));
  std::vector<double> logw(n);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < n; ++i) {
      double d2 = 0.0;
      for (std::size_t j = 0; j < per; ++j) {
        const double d = x[r * per + j] - a * pts[i * per + j];
        d2 += d * d;
      }
      logw[i] = -d2 / (2.0 * var);
    }
    const double lse = log_sum_exp(logw);
    for (std::size_t i = 0; i < n; ++i) {
      const double w = std::exp(logw[i] - lse);
      for (std::size_t j = 0; j < per; ++j) out[r][j] += w * pts[i * per + j];
    }
  }
  return out;
}

Tensor posterior_optimal_v(const Tensor& x_t, int t, const FiniteDataset& data, const NoiseSchedule& s) {
  return v_from_mean(x_t, posterior_mean_x0(x_t, t, data, s), t, s);
}

std::vector<std::vector<double>> gaussian_mixture_mean_x0(const Tensor& x_t, int t, const GaussianMixture& mixture,
                                                          const NoiseSchedule& s) {
  mixture.validate();
  require_noisy(t, s, "gaussian_mixture_v");
  const std::size_t per = mixture.means[0].size();
  if (x_t.per_sample() != per) throw DimensionError("gaussian_mixture_v: x_t does not match the mixture dimension");
  const double a = s.sqrt_alpha_bar(t);
  const double b2 = 1.0 - s.alpha_bar(t);
  const std::size_t rows = x_t.dim(0), comps = mixture.means.size();
  auto x = x_t.data();
  std::vector<std::vector<double>> out(rows, std::vector<double>(per, 0.0));
  std::vector<double> logr(comps);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t k = 0; k < comps; ++k) {
      const double var = a * a * mixture.sigmas[k] * mixture.sigmas[k] + b2;
      double d2 = 0.0;
      for (std::size_t j = 0; j < per; ++j) {
        const double d = x[r * per + j] - a * mixture.means[k][j];
        d2 += d * d;
      }
      logr[k] = mixture.weights[k] > 0.0
                    ? std::log(mixture.weights[k]) - 0.5 * static_cast<double>(per) * std::log(var) - d2 / (2.0 * var)
                    : -std::numeric_limits<double>::infinity();
    }
    const double lse = log_sum_exp(logr);
    for (std::size_t k = 0; k < comps; ++k) {
      const double resp = std::exp(logr[k] - lse);
      if (resp == 0.0) continue;
      const double var = a * a * mixture.sigmas[k] * mixture.sigmas[k] + b2;
      const double gain = a * mixture.sigmas[k] * mixture.sigmas[k] / var;
      for (std::size_t j = 0; j < per; ++j) {
        const double mu = mixture.means[k][j];
        out[r][j] += resp * (mu + gain * (x[r * per + j] - a * mu));
      }
    }
  }
  return out;
}

Tensor gaussian_mixture_v(const Tensor& x_t, int t, const GaussianMixture& mixture, const NoiseSchedule& s) {
  return v_from_mean(x_t, gaussian_mixture_mean_x0(x_t, t, mixture, s), t, s);
}

Tensor mse_midpoint(std::span<const Tensor> samples) {
  if (samples.empty()) throw ContractError("mse_midpoint: need at least one sample");
  std::vector<double> acc(samples[0].numel(), 0.0);
  for (const auto& x : samples) {
    if (x.shape() != samples[0].shape()) throw DimensionError("mse_midpoint: sample shapes differ");
    auto d = x.data();
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += d[i];
  }
  std::vector<float> out(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i] / static_cast<double>(samples.size()));
  return Tensor(samples[0].shape(), std::move(out));
}

double energy_distance(const Tensor& a, const Tensor& b) {
  require_rows(a, b, 2, "energy_distance");
  auto dist = [](double d2) { return std::sqrt(d2); };
  const double ab = mean_pairwise(a, b, dist);
  const double aa = mean_pairwise(a, a, dist);
  const double bb = mean_pairwise(b, b, dist);
  return std::max(0.0, 2.0 * ab - aa - bb);
}

double mmd_rbf(const Tensor& a, const Tensor& b, double bandwidth) {
  require_rows(a, b, 2, "mmd_rbf");
  double h = bandwidth;
  if (!(h > 0.0)) {
    // Median pairwise distance over (at most) the first 512 rows of each set.
    const std::size_t na = std::min<std::size_t>(a.dim(0), 512), nb = std::min<std::size_t>(b.dim(0), 512);
    const std::size_t d = a.per_sample();
    std::vector<const float*> rows;
    for (std::size_t i = 0; i < na; ++i) rows.push_back(a.data().data() + i * d);
    for (std::size_t i = 0; i < nb; ++i) rows.push_back(b.data().data() + i * d);
    std::vector<double> dists;
    dists.reserve(rows.size() * (rows.size() - 1) / 2);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = i + 1; j < rows.size(); ++j) dists.push_back(std::sqrt(sq_dist(rows[i], rows[j], d)));
    auto mid = dists.begin() + static_cast<long>(dists.size() / 2);
    std::nth_element(dists.begin(), mid, dists.end());
    h = *mid > 0.0 ? *mid : 1.0;
  }
  const double inv = 1.0 / (2.0 * h * h);
  auto kernel = [inv](double d2) { return std::exp(-d2 * inv); };
  const double value = mean_pairwise(a, a, kernel) + mean_pairwise(b, b, kernel) - 2.0 * mean_pairwise(a, b, kernel);
  return std::max(0.0, value);
}

double nearest_neighbor_recall(const Tensor& reference, const Tensor& generated, int k) {
  require_rows(reference, generated, 1, "nearest_neighbor_recall");
  const std::size_t ng = generated.dim(0), nr = reference.dim(0), d = generated.per_sample();
  if (k < 1 || static_cast<std::size_t>(k) >= ng) throw ContractError("nearest_neighbor_recall: need 1 <= k < |generated|");
  const float* g = generated.data().data();
  const float* r = reference.data().data();
  std::vector<double> radius2(ng);
  std::vector<double> row(ng - 1);
  for (std::size_t i = 0; i < ng; ++i) {
    std::size_t c = 0;
    for (std::size_t j = 0; j < ng; ++j) {
      if (j != i) row[c++] = sq_dist(g + i * d, g + j * d, d);
    }
    std::nth_element(row.begin(), row.begin() + (k - 1), row.end());
    radius2[i] = row[static_cast<std::size_t>(k - 1)];
  }
  std::size_t covered = 0;
  for (std::size_t i = 0; i < nr; ++i) {
    for (std::size_t j = 0; j < ng; ++j) {
      if (sq_dist(r + i * d, g + j * d, d) <= radius2[j]) {
        ++covered;
        break;
      }
    }
  }
  return static_cast<double>(covered) / static_cast<double>(nr);
}

MetricReport compute_metrics(const Tensor& reference, const Tensor& generated) {
  MetricReport m;
  m.energy_distance = energy_distance(reference, generated);
  m.mmd_rbf = mmd_rbf(reference, generated);
  m.nearest_neighbor_recall = nearest_neighbor_recall(reference, generated);
  return m;
}

}  // namespace splab
