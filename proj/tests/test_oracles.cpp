#include <cmath>

#include "doctest.h"
#include "splab/oracles.hpp"
#include "splab/schedule.hpp"
#include "support.hpp"

using namespace splab;
using splab::testing::random_tensor;

namespace {

FiniteDataset points(std::vector<float> xy) {
  FiniteDataset d;
  const std::size_t n = xy.size() / 2;
  d.points = Tensor({n, 2}, std::move(xy));
  return d;
}

Tensor shifted_normal(std::size_t n, std::size_t dim, float shift, Rng& rng) {
  Tensor t = random_tensor({n, dim}, rng);
  for (std::size_t i = 0; i < t.numel(); ++i) t.data()[i] += shift;
  return t;
}

}  // namespace

TEST_SUITE("oracles") {

TEST_CASE("posterior v for a single point is the analytic v") {
  const auto s = NoiseSchedule::zero_terminal_snr();
  const auto data = points({0.3f, -0.7f});
  Rng rng(1);
  const Tensor x_t = random_tensor({5, 2}, rng);
  for (int t : {1, 100, 700, 999, 1000}) {
    const Tensor v = posterior_optimal_v(x_t, t, data, s);
    const double a = s.sqrt_alpha_bar(t), b = s.sqrt_one_minus_alpha_bar(t);
    for (std::size_t r = 0; r < 5; ++r) {
      for (std::size_t j = 0; j < 2; ++j) {
        const double x0 = data.points[j];
        const double eps = (x_t[r * 2 + j] - a * x0) / b;
        CHECK(v[r * 2 + j] == doctest::Approx(a * eps - b * x0).epsilon(1e-5));
      }
    }
  }
}

TEST_CASE("posterior mean weights points by their likelihood") {
  const auto s = NoiseSchedule::from_alpha_bar({0.5});
  const auto data = points({1.0f, 0.0f, -1.0f, 0.0f});
  const Tensor x_t({1, 2}, {0.2f, 0.0f});
  // Likelihood ratio exp(2 * sqrt(0.5) * 0.2 / 0.5) between the two points.
  const double w1 = 1.0 / (1.0 + std::exp(-4.0 * std::sqrt(0.5) * 0.2));
  const auto m = posterior_mean_x0(x_t, 1, data, s);
  CHECK(m[0][0] == doctest::Approx(2.0 * w1 - 1.0).epsilon(1e-6));
  CHECK(m[0][1] == doctest::Approx(0.0));
  CHECK_THROWS_AS(posterior_optimal_v(x_t, 1, data, NoiseSchedule::from_alpha_bar({1.0})), ContractError);
}

TEST_CASE("mixture posterior agrees with importance sampling") {
  const auto s = NoiseSchedule::zero_terminal_snr();
  GaussianMixture mix;
  mix.means = {{1.0, 0.0}, {-0.5, 0.8}, {0.0, -1.0}};
  mix.sigmas = {0.1, 0.3, 0.2};
  mix.weights = {0.5, 0.3, 0.2};
  Rng rng(2);
  const int t = 400;
  const double a = s.sqrt_alpha_bar(t), b = s.sqrt_one_minus_alpha_bar(t);
  const Tensor x_t({2, 2}, {0.6f, 0.2f, -0.3f, -0.4f});
  const auto exact = gaussian_mixture_mean_x0(x_t, t, mix, s);
  for (std::size_t r = 0; r < 2; ++r) {
    double wsum = 0.0, mx = 0.0, my = 0.0;
    for (int i = 0; i < 200000; ++i) {
      const double u = rng.uniform();
      const std::size_t k = u < 0.5 ? 0 : (u < 0.8 ? 1 : 2);
      const double x = mix.means[k][0] + mix.sigmas[k] * rng.normal(0.0, 1.0);
      const double y = mix.means[k][1] + mix.sigmas[k] * rng.normal(0.0, 1.0);
      const double dx = x_t[r * 2] - a * x, dy = x_t[r * 2 + 1] - a * y;
      const double w = std::exp(-(dx * dx + dy * dy) / (2.0 * b * b));
      wsum += w;
      mx += w * x;
      my += w * y;
    }
    const double norm = std::hypot(exact[r][0], exact[r][1]);
    CHECK(std::hypot(mx / wsum - exact[r][0], my / wsum - exact[r][1]) < 0.01 * norm);
  }
}

TEST_CASE("a zero-width mixture matches the finite-set posterior") {
  const auto s = NoiseSchedule::zero_terminal_snr();
  GaussianMixture mix;
  mix.means = {{1.0, 0.0}, {-1.0, 0.5}};
  mix.sigmas = {0.0, 0.0};
  mix.weights = {0.5, 0.5};
  const auto data = points({1.0f, 0.0f, -1.0f, 0.5f});
  Rng rng(3);
  const Tensor x_t = random_tensor({8, 2}, rng);
  for (int t : {50, 500, 990}) {
    const Tensor a = gaussian_mixture_v(x_t, t, mix, s), b = posterior_optimal_v(x_t, t, data, s);
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-5));
  }
}

TEST_CASE("mse midpoint is the mean and matches gradient descent") {
  Rng rng(4);
  const std::vector<Tensor> samples{random_tensor({3}, rng), random_tensor({3}, rng), random_tensor({3}, rng)};
  const Tensor mid = mse_midpoint(samples);
  std::vector<double> m(3, 0.0);
  for (int it = 0; it < 2000; ++it) {
    for (std::size_t j = 0; j < 3; ++j) {
      double g = 0.0;
      for (const auto& sm : samples) g += 2.0 * (m[j] - sm[j]);
      m[j] -= 0.05 * g;
    }
  }
  for (std::size_t j = 0; j < 3; ++j) {
    CHECK(std::abs(mid[j] - m[j]) < 1e-4);
    CHECK(mid[j] == doctest::Approx((samples[0][j] + samples[1][j] + samples[2][j]) / 3.0).epsilon(1e-6));
  }
}

TEST_CASE("energy distance of identical and shifted normals") {
  Rng rng(5);
  CHECK(energy_distance(shifted_normal(10000, 1, 0.0f, rng), shifted_normal(10000, 1, 0.0f, rng)) < 0.02);
  const double ed = energy_distance(shifted_normal(4000, 1, 0.0f, rng), shifted_normal(4000, 1, 1.0f, rng));
  CHECK(std::abs(ed - 0.5414) < 0.03);
  const Tensor one = shifted_normal(1, 2, 0.0f, rng);
  CHECK_THROWS(energy_distance(one, shifted_normal(5, 2, 0.0f, rng)));
}

TEST_CASE("mmd is non-negative and zero on identical sets") {
  Rng rng(6);
  const Tensor a = shifted_normal(300, 2, 0.0f, rng), b = shifted_normal(300, 2, 0.0f, rng);
  const Tensor c = shifted_normal(300, 2, 2.0f, rng);
  CHECK(mmd_rbf(a, b) >= 0.0);
  CHECK(std::abs(mmd_rbf(a, a)) < 1e-12);
  CHECK(mmd_rbf(a, c) > 10.0 * mmd_rbf(a, b));
  CHECK(mmd_rbf(a, c, 0.5) >= 0.0);
}

TEST_CASE("nearest neighbour recall") {
  Rng rng(7);
  const Tensor ref = shifted_normal(400, 2, 0.0f, rng);
  CHECK(nearest_neighbor_recall(ref, ref) == 1.0);
  CHECK(nearest_neighbor_recall(ref, shifted_normal(400, 2, 0.0f, rng)) > 0.8);
  CHECK(nearest_neighbor_recall(ref, shifted_normal(400, 2, 50.0f, rng)) == 0.0);
  const auto report = compute_metrics(ref, ref);
  CHECK(report.nearest_neighbor_recall == 1.0);
  CHECK(std::abs(report.energy_distance) < 1e-9);
}

}  // TEST_SUITE
