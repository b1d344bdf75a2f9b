#include <cmath>

#include "doctest.h"
#include "splab/sampler.hpp"
#include "support.hpp"

using namespace splab;
using splab::testing::random_tensor;

namespace {

std::unique_ptr<DenoiserModel> small_model(Rng& rng) {
  ModelSpec s;
  s.num_classes = 3;
  s.hidden = 16;
  s.time_embed_dim = 8;
  s.class_embed_dim = 4;
  return DenoiserModel::create(s, rng);
}

void check_bitwise_equal(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) REQUIRE(a[i] == b[i]);
}

}  // namespace

TEST_SUITE("sampler") {

TEST_CASE("timestep grid is trailing and starts at T") {
  const auto g = make_timestep_grid(25, 1000);
  REQUIRE(g.size() == 25);
  CHECK(g.front() == 1000);
  CHECK(g.back() == 40);
  for (std::size_t i = 1; i < g.size(); ++i) CHECK(g[i - 1] - g[i] == 40);
  CHECK(make_timestep_grid(3, 10) == std::vector<int>{10, 7, 3});
  const auto full = make_timestep_grid(1000, 1000);
  CHECK(full.front() == 1000);
  CHECK(full.back() == 1);
  CHECK_THROWS_AS(make_timestep_grid(0, 1000), ConfigError);
  CHECK_THROWS_AS(make_timestep_grid(1001, 1000), ConfigError);
}

TEST_CASE("a DDIM step with the true v lands on the forward process") {
  const auto s = NoiseSchedule::zero_terminal_snr();
  Rng rng(1);
  const Tensor x0 = random_tensor({32, 2}, rng), eps = random_tensor({32, 2}, rng);
  for (auto [t, tn] : std::vector<std::pair<int, int>>{{1000, 960}, {500, 100}, {40, 1}, {2, 1}}) {
    const Tensor x_t = forward_diffuse(x0, eps, t, s);
    const Tensor next = ddim_step(x_t, v_target(x0, eps, t, s), t, tn, s);
    const Tensor want = forward_diffuse(x0, eps, tn, s);
    for (std::size_t i = 0; i < next.numel(); ++i) CHECK(std::abs(next[i] - want[i]) < 1e-5);
  }
  const Tensor x_t = forward_diffuse(x0, eps, 300, s);
  const Tensor v = random_tensor({32, 2}, rng);
  check_bitwise_equal(ddim_step(x_t, v, 300, 0, s), v_to_x0(v, x_t, 300, s));
  CHECK_THROWS_AS(ddim_step(x_t, v, 300, 300, s), ContractError);
  CHECK_THROWS_AS(ddim_step(x_t, v, 300, 400, s), ContractError);
  CHECK_NOTHROW(ddim_transition(x_t, v, 300, 400, s));
}

TEST_CASE("guidance combine and rescale") {
  Rng rng(2);
  const Tensor vc = random_tensor({4, 3}, rng), vu = random_tensor({4, 3}, rng);
  check_bitwise_equal(cfg_combine(vc, vu, 1.0), vc);
  check_bitwise_equal(cfg_combine(vc, vu, 0.0), vu);
  const Tensor guided = cfg_combine(vc, vu, 7.5);
  check_bitwise_equal(cfg_rescale(guided, vc, 0.0), guided);

  const Tensor cond({1, 2}, {1.0f, -1.0f}), g({1, 2}, {2.0f, -2.0f});
  const Tensor r = cfg_rescale(g, cond, 0.7);
  CHECK(r[0] == doctest::Approx(1.3));
  CHECK(r[1] == doctest::Approx(-1.3));
  const Tensor flat({1, 2}, {0.5f, 0.5f});
  check_bitwise_equal(cfg_rescale(flat, cond, 1.0), flat);
}

TEST_CASE("function evaluation counts") {
  const auto s = NoiseSchedule::zero_terminal_snr();
  Rng rng(3);
  auto m = small_model(rng);
  const auto cond = repeat_conditioning(Conditioning::of(1), 4);
  const auto null = repeat_conditioning(Conditioning::null(), 4);
  auto nfe = [&](std::span<const Conditioning> c, double w) {
    SamplerConfig cfg;
    cfg.cfg_scale = w;
    Rng r(4);
    return sample(*m, c, cfg, s, r).nfe;
  };
  CHECK(nfe(cond, 1.0) == 25);
  CHECK(nfe(cond, 7.5) == 50);
  CHECK(nfe(cond, 0.0) == 25);
  CHECK(nfe(null, 7.5) == 25);
}

TEST_CASE("w = 1 follows the conditional path exactly") {
  const auto s = NoiseSchedule::zero_terminal_snr();
  Rng rng(5);
  auto m = small_model(rng);
  const auto c = repeat_conditioning(Conditioning::of(2), 6);
  const Tensor x_T = random_tensor({6, 2}, rng);
  SamplerConfig cfg;
  cfg.steps = 10;
  cfg.rescale_phi = 0.7;
  cfg.record_trajectory = true;
  const auto traj = sample_from(*m, x_T, c, cfg, s);

  const auto grid = make_timestep_grid(10, 1000);
  Tensor x = x_T;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const std::vector<int> ts(6, grid[i]);
    x = ddim_step(x, m->forward(x, ts, c), grid[i], i + 1 < grid.size() ? grid[i + 1] : 0, s);
  }
  check_bitwise_equal(traj.sample, x);
  REQUIRE(traj.steps.size() == 10);
  for (std::size_t i = 0; i < grid.size(); ++i) CHECK(traj.steps[i].t == grid[i]);
  CHECK(traj.steps.back().t_next == 0);
  check_bitwise_equal(sample_from(*m, x_T, c, cfg, s).sample, traj.sample);
}

TEST_CASE("sampler settings are validated") {
  SamplerConfig cfg;
  cfg.steps = 0;
  CHECK_THROWS_AS(cfg.validate(1000), ConfigError);
  cfg.steps = 25;
  cfg.rescale_phi = 1.5;
  CHECK_THROWS_AS(cfg.validate(1000), ConfigError);
  cfg.rescale_phi = 0.0;
  cfg.cfg_scale = -1.0;
  CHECK_THROWS_AS(cfg.validate(1000), ConfigError);
}

}  // TEST_SUITE
