#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "splab/rng.hpp"
#include "splab/tensor.hpp"

namespace splab::testing {

inline Tensor random_tensor(const Shape& shape, Rng& rng, float scale = 1.0f) {
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) x = scale * rng.normal();
  return Tensor(shape, std::move(v));
}

/// Scalar loss sum(y * w) with a fixed random weight tensor, so a vector op
/// can be checked through one backward pass.
inline Tensor project(const Tensor& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  return sum(mul(y, random_tensor(y.shape(), rng)));
}

/// Five-point finite-difference check of a scalar function. For each input the
/// error is ||g_analytic - g_numeric|| / max(||g_analytic||, ||g_numeric||)
/// over the checked coordinates (at most `max_coords` per input, spread
/// evenly). Returns the largest error over inputs.
inline double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f, std::vector<Tensor> inputs,
                         double h = 1e-2, std::size_t max_coords = 64) {
  for (auto& x : inputs) {
    x.set_requires_grad(true);
    x.zero_grad();
  }
  {
    Tape tape;
    Tensor loss;
    {
      Tape::Scope scope(tape);
      loss = f(inputs);
    }
    tape.backward(loss);
  }
  double worst = 0.0;
  for (auto& x : inputs) {
    const auto analytic = std::vector<float>(x.grad().begin(), x.grad().end());
    const std::size_t n = x.numel();
    const std::size_t stride = std::max<std::size_t>(1, n / max_coords);
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t i = 0; i < n; i += stride) {
      const float orig = x.data()[i];
      auto at = [&](double offset) {
        const auto shifted = static_cast<float>(orig + offset);
        x.data()[i] = shifted;
        const double y = f(inputs).item();
        x.data()[i] = orig;
        return std::pair{static_cast<double>(shifted) - orig, y};
      };
      // Fourth-order stencil so a step large enough to swamp float32
      // rounding still has negligible truncation error.
      const auto [h1p, f1p] = at(h);
      const auto [h1m, f1m] = at(-h);
      const auto [h2p, f2p] = at(2 * h);
      const auto [h2m, f2m] = at(-2 * h);
      const double step = (h1p - h1m + (h2p - h2m) / 2.0) / 4.0;
      const double numeric = (8.0 * (f1p - f1m) - (f2p - f2m)) / (12.0 * step);
      diff2 += (numeric - analytic[i]) * (numeric - analytic[i]);
      a2 += static_cast<double>(analytic[i]) * analytic[i];
      n2 += numeric * numeric;
    }
    const double denom = std::sqrt(std::max(a2, n2));
    if (denom > 0.0) worst = std::max(worst, std::sqrt(diff2) / denom);
  }
  return worst;
}

}  // namespace splab::testing
