// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits nonzero when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "splab/checkpoint.hpp"
#include "splab/datasets.hpp"
#include "splab/harness.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using namespace splab;
using splab::testing::grad_check;
using splab::testing::project;
using splab::testing::random_tensor;
using Inputs = std::vector<Tensor>;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

template <typename... Args>
std::string format(const char* fmt, Args... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), fmt, args...);
  return buf;
}

template <typename... Args>
void info(const char* fmt, Args... args) {
  std::printf("INFO  %s\n", format(fmt, args...).c_str());
  std::fflush(stdout);
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)) == 0;
}

bool bit_equal(double a, double b) { return std::memcmp(&a, &b, sizeof(double)) == 0; }

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(double(a[i]) - double(b[i])));
  return worst;
}

double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / double(v.size()); }

double sample_std(const std::vector<double>& v) {
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / double(v.size() - 1));
}

ExperimentConfig load_config(const fs::path& file, const fs::path& out, std::uint64_t seed) {
  ExperimentConfig cfg = parse_config_file(file);
  cfg.output_dir = out;
  cfg.seed = seed;
  cfg.validate();
  return cfg;
}

ModelSpec small_unet() {
  ModelSpec spec;
  spec.kind = ModelKind::TinyUnet;
  spec.num_classes = 3;
  spec.image_size = 8;
  spec.channels = {4, 8, 8};
  spec.groups = 2;
  spec.cond_dim = 8;
  spec.time_embed_dim = 8;
  spec.class_embed_dim = 8;
  return spec;
}

ModelSpec small_mlp() {
  ModelSpec spec;
  spec.num_classes = 3;
  spec.hidden = 16;
  spec.time_embed_dim = 8;
  spec.class_embed_dim = 8;
  return spec;
}

// ---------------------------------------------------------------------------

struct DatasetGap {
  std::vector<double> mse, sp, control;
  double train_eval_seconds = 0.0;
  double control_seconds = 0.0;
};

/// Trains MSE then SP for each seed and records held-out energy distances.
/// The control continues the MSE phase for as many steps as SP ran.
DatasetGap sp_vs_mse(const fs::path& config, const fs::path& out, int seeds, bool control) {
  DatasetGap g;
  for (int seed = 0; seed < seeds; ++seed) {
    const auto start = std::chrono::steady_clock::now();
    Experiment e(load_config(config, out, static_cast<std::uint64_t>(seed)));
    e.ensure_mse();
    e.ensure_sp();
    const auto mse = e.load_model("mse");
    const auto sp = e.load_model("sp");
    g.mse.push_back(e.evaluate(*mse, e.config().sampler).metrics.energy_distance);
    g.sp.push_back(e.evaluate(*sp, e.config().sampler).metrics.energy_distance);
    g.train_eval_seconds += seconds_since(start);
    info("%s seed %d: mse ED %.6g  sp ED %.6g", config.stem().c_str(), seed, g.mse.back(), g.sp.back());
    if (control) {
      const auto cstart = std::chrono::steady_clock::now();
      ExperimentConfig longer_cfg = e.config();
      longer_cfg.mse.steps += longer_cfg.sp.steps;
      Experiment longer(longer_cfg);
      e.seed_longer_mse(longer);
      longer.ensure_mse();
      const auto lm = longer.load_model("mse");
      g.control.push_back(longer.evaluate(*lm, longer.config().sampler).metrics.energy_distance);
      g.control_seconds += seconds_since(cstart);
      info("%s seed %d: mse continued %d steps ED %.6g", config.stem().c_str(), seed, longer_cfg.mse.steps,
           g.control.back());
    }
  }
  return g;
}

Outcome criterion_sp_beats_mse(const fs::path& configs, const fs::path& work, double& shapes_seed0_seconds) {
  constexpr int kSeeds = 5;
  constexpr double kBudgetSeconds = 30 * 60;
  Outcome o;
  o.pass = true;
  double total = 0.0;
  for (const char* name : {"accept_gauss8", "accept_shapes16"}) {
    const DatasetGap g = sp_vs_mse(configs / (std::string(name) + ".cfg"), work / "c1", kSeeds, true);
    std::vector<double> d(kSeeds), dc(kSeeds);
    for (int i = 0; i < kSeeds; ++i) {
      d[i] = g.mse[i] - g.sp[i];
      dc[i] = g.control[i] - g.sp[i];
    }
    const double gap = mean_of(d), sd = sample_std(d);
    const bool ok = gap > 0.0 && gap > 3.0 * sd;
    o.pass = o.pass && ok;
    total += g.train_eval_seconds;
    if (std::string(name) == "accept_shapes16") shapes_seed0_seconds = g.train_eval_seconds / kSeeds;
    info("%s: budget-matched MSE minus SP: mean %.4g, std %.4g (%.0f s)", name, mean_of(dc), sample_std(dc),
         g.control_seconds);
    o.detail += format("%s gap %.4g vs 3*std %.4g (mse %.4g, sp %.4g)%s; ", name, gap, 3.0 * sd, mean_of(g.mse),
                       mean_of(g.sp), ok ? "" : " NOT MET");
  }
  o.pass = o.pass && total < kBudgetSeconds;
  o.detail += format("%.0f s of %.0f s", total, kBudgetSeconds);
  return o;
}

Outcome criterion_oracle_match() {
  constexpr double kTol = 1e-2;
  const auto start = std::chrono::steady_clock::now();
  FiniteDataset data;
  data.points = Tensor({4, 2}, {1.0f, 0.0f, 0.0f, 1.0f, -1.0f, 0.0f, 0.3f, -0.8f});
  const NoiseSchedule s = NoiseSchedule::zero_terminal_snr();
  ModelSpec spec;
  spec.hidden = 256;
  Rng init(3);
  const auto model = DenoiserModel::create(spec, init);
  TrainingState state = TrainingState::start_from(*model);
  PhaseOptions opts;
  opts.conditional = false;
  opts.steps = 6000;
  opts.lr = 1e-3;
  opts.batch = 256;
  opts.log_every = 1000;
  opts.seed = 1;
  train_phase(state, data, nullptr, s, opts);

  std::vector<int> ts;
  for (int t = 1; t <= s.timesteps(); ++t) {
    if (s.alpha_bar(t) >= 0.05 && s.alpha_bar(t) <= 0.95) ts.push_back(t);
  }
  Rng rng(9);
  constexpr int kProbes = 1000;
  double err = 0.0, worst = 0.0;
  const Conditioning c = Conditioning::null();
  for (int p = 0; p < kProbes; ++p) {
    const int t = ts[static_cast<std::size_t>(rng.uniform_int(0, int(ts.size()) - 1))];
    const std::size_t i = static_cast<std::size_t>(rng.uniform_int(0, 3));
    const Tensor x0({1, 2}, {data.points[2 * i], data.points[2 * i + 1]});
    const Tensor x_t = forward_diffuse(x0, Tensor::randn({1, 2}, rng), t, s);
    const std::vector<int> tv{t};
    const Tensor v = state.ema->forward(x_t, tv, std::span<const Conditioning>(&c, 1));
    const Tensor best = posterior_optimal_v(x_t, t, data, s);
    const double e = (std::pow(v[0] - best[0], 2) + std::pow(v[1] - best[1], 2)) / 2.0;
    err += e;
    worst = std::max(worst, e);
  }
  err /= kProbes;
  const double secs = seconds_since(start);
  Outcome o;
  o.pass = err < kTol && secs < 120.0;
  o.detail = format("mse %.3g (< %.0e) over %d probes, worst probe %.3g, %.0f s of 120 s", err, kTol, kProbes, worst,
                    secs);
  return o;
}

Outcome criterion_renoise_is_ddim() {
  constexpr double kTol = 1e-5;
  const NoiseSchedule s = NoiseSchedule::zero_terminal_snr();
  Rng rng(21);
  double worst = 0.0;
  constexpr int kTuples = 1000;
  for (int i = 0; i < kTuples; ++i) {
    const std::size_t d = static_cast<std::size_t>(rng.uniform_int(1, 8));
    const int t = rng.uniform_int(1, s.timesteps());
    int tp = rng.uniform_int(1, s.timesteps());
    if (tp == t) tp = t == 1 ? 2 : t - 1;
    const Tensor x0 = random_tensor({1, d}, rng);
    const Tensor eps = random_tensor({1, d}, rng);
    const Tensor v_hat = random_tensor({1, d}, rng);
    const std::vector<int> tv{t}, tpv{tp};
    const SpRenoised r = sp_renoise(x0, eps, v_hat, tv, tpv, s);
    const Tensor x_t = forward_diffuse(x0, eps, t, s);
    const Tensor ref = tp < t ? ddim_step(x_t, v_hat, t, tp, s) : ddim_transition(x_t, v_hat, t, tp, s);
    worst = std::max(worst, max_abs_diff(r.x_tprime_hat, ref));
  }
  return {worst < kTol, format("max |renoised - ddim| %.3g (< %.0e) over %d tuples", worst, kTol, kTuples)};
}

Outcome criterion_identities() {
  const NoiseSchedule s = NoiseSchedule::zero_terminal_snr();
  Rng rng(22);
  double round_trip = 0.0, same_t = 0.0, loss_at_target = 0.0, mae_at_target = 0.0;
  for (int i = 0; i < 500; ++i) {
    const int t = i == 0 ? 1 : i == 1 ? s.timesteps() : rng.uniform_int(1, s.timesteps());
    const Tensor x0 = random_tensor({4, 3}, rng);
    const Tensor eps = random_tensor({4, 3}, rng);
    const Tensor x_t = forward_diffuse(x0, eps, t, s);
    const Tensor v = v_target(x0, eps, t, s);
    round_trip = std::max({round_trip, max_abs_diff(v_to_x0(v, x_t, t, s), x0), max_abs_diff(v_to_eps(v, x_t, t, s), eps)});
    const std::vector<int> tv(4, t);
    const SpRenoised r = sp_renoise(x0, eps, random_tensor({4, 3}, rng), tv, tv, s);
    same_t = std::max(same_t, max_abs_diff(r.x_tprime_hat, r.x_tprime));
  }
  for (const ModelSpec& spec : {small_mlp(), small_unet()}) {
    Rng init(23);
    auto frozen = DenoiserModel::create(spec, init);
    frozen->set_trainable(false);
    const Shape shape = spec.kind == ModelKind::Mlp2d ? Shape{6, 2} : Shape{6, 1, 8, 8};
    for (const FeatureTap tap : {FeatureTap::EncoderAll, FeatureTap::DecoderAll, FeatureTap::EncoderPlusMid,
                                 FeatureTap::MidOnly}) {
      for (const FeatureDistance dist : {FeatureDistance::Mse, FeatureDistance::Mae}) {
        const Tensor x0 = random_tensor(shape, rng);
        const Tensor eps = random_tensor(shape, rng);
        std::vector<int> t(6), tp(6);
        for (std::size_t k = 0; k < 6; ++k) {
          t[k] = rng.uniform_int(1, s.timesteps());
          tp[k] = rng.uniform_int(1, s.timesteps());
        }
        const std::vector<Conditioning> c{Conditioning::of(0), Conditioning::null(), Conditioning::of(2),
                                          Conditioning::of(1), Conditioning::null(), Conditioning::of(0)};
        SpConfig cfg;
        cfg.tap = tap;
        cfg.distance = dist;
        const Tensor v = v_target(x0, eps, t, s);
        const Tensor loss = sp_loss_from_prediction(*frozen, x0, eps, v, t, tp, c, s, cfg);
        double& slot = dist == FeatureDistance::Mse ? loss_at_target : mae_at_target;
        slot = std::max(slot, std::abs(double(loss.item())));
      }
    }
  }
  // The loss uses the squared feature distance; the absolute-distance variant
  // grows linearly with float32 rounding and is reported for reference.
  info("sp loss at v target with mean absolute feature distance: %.3g", mae_at_target);
  const bool ok = round_trip < 1e-5 && same_t < 1e-6 && loss_at_target < 1e-6;
  return {ok, format("v round trips %.3g (< 1e-5), t'=t renoise %.3g (< 1e-6), sp loss at v target %.3g (< 1e-6)",
                     round_trip, same_t, loss_at_target)};
}

Outcome criterion_schedule() {
  const NoiseSchedule s = NoiseSchedule::zero_terminal_snr();
  const auto ab = s.alpha_bar_table();
  bool decreasing = true;
  for (std::size_t i = 1; i < ab.size(); ++i) decreasing = decreasing && ab[i] < ab[i - 1];
  const bool terminal_zero = s.alpha_bar(s.timesteps()) == 0.0;
  bool grid_starts_at_T = true;
  for (int steps : {1, 2, 10, 25, 50, 999, 1000}) {
    grid_starts_at_T = grid_starts_at_T && make_timestep_grid(steps, s.timesteps()).front() == s.timesteps();
  }
  Rng rng(24);
  const Tensor eps = random_tensor({8, 1, 4, 4}, rng);
  const Tensor a = forward_diffuse(random_tensor({8, 1, 4, 4}, rng), eps, s.timesteps(), s);
  const Tensor b = forward_diffuse(random_tensor({8, 1, 4, 4}, rng, 100.0f), eps, s.timesteps(), s);
  const Tensor z = forward_diffuse(Tensor::zeros({8, 1, 4, 4}), eps, s.timesteps(), s);
  const bool independent = bit_equal(a, b) && bit_equal(a, z);
  const bool ok = decreasing && terminal_zero && grid_starts_at_T && independent;
  return {ok, format("alpha_bar strictly decreasing %s, alpha_bar(T) == 0 %s, grid starts at T %s, "
                     "x_T independent of x0 %s",
                     decreasing ? "yes" : "NO", terminal_zero ? "yes" : "NO", grid_starts_at_T ? "yes" : "NO",
                     independent ? "yes" : "NO")};
}

Outcome criterion_gradients() {
  constexpr double kTol = 1e-3;
  const auto start = std::chrono::steady_clock::now();
  Rng rng(25);
  std::vector<std::pair<std::string, double>> errors;
  auto check = [&](const std::string& name, const std::function<Tensor(const Inputs&)>& f, Inputs in,
                   double h = 1e-2, std::size_t coords = 64) { errors.emplace_back(name, grad_check(f, std::move(in), h, coords)); };
  const Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng), row = random_tensor({4}, rng);
  check("add", [](const Inputs& in) { return project(add(in[0], in[1])); }, {a, b});
  check("add/broadcast", [](const Inputs& in) { return project(add(in[0], in[1])); }, {a, row});
  check("sub", [](const Inputs& in) { return project(sub(in[0], in[1])); }, {a, b});
  check("mul", [](const Inputs& in) { return project(mul(in[0], in[1])); }, {a, b});
  check("mul/broadcast", [](const Inputs& in) { return project(mul(in[0], in[1])); }, {a, row});
  check("scale", [](const Inputs& in) { return project(scale(in[0], -1.5f)); }, {a});
  check("silu", [](const Inputs& in) { return project(silu(in[0])); }, {a});
  check("mse_reduce", [](const Inputs& in) { return mse_reduce(in[0], in[1]); }, {a, b});
  check("mae_reduce", [](const Inputs& in) { return mae_reduce(in[0], in[1]); }, {a, b}, 1e-3);
  check("mean", [](const Inputs& in) { return mean(mul(in[0], in[0])); }, {a});
  check("sum", [](const Inputs& in) { return sum(mul(in[0], in[1])); }, {a, b});
  check("reshape", [](const Inputs& in) { return project(in[0].reshape({4, 3})); }, {a});
  const Tensor x = random_tensor({5, 3}, rng), w = random_tensor({3, 4}, rng), bias = random_tensor({4}, rng);
  check("matmul", [](const Inputs& in) { return project(matmul(in[0], in[1])); }, {x, w});
  check("linear", [](const Inputs& in) { return project(linear(in[0], in[1], in[2])); }, {x, w, bias});
  const std::vector<int> idx{0, 5, 2, 2};
  check("embedding", [&](const Inputs& in) { return project(embedding(in[0], idx)); }, {random_tensor({6, 3}, rng)});
  const std::vector<float> ca{0.5f, -1.0f, 2.0f, 0.1f, 1.0f}, cb{1.0f, 0.3f, -0.7f, 2.0f, 0.0f};
  check("lincomb_rows", [&](const Inputs& in) { return project(lincomb_rows(in[0], ca, in[1], cb)); },
        {x, random_tensor({5, 3}, rng)});
  check("scale_rows", [&](const Inputs& in) { return project(scale_rows(in[0], ca)); }, {x});
  check("layer_norm", [](const Inputs& in) { return project(layer_norm(in[0], in[1], in[2])); },
        {random_tensor({3, 8}, rng), random_tensor({8}, rng), random_tensor({8}, rng)});
  check("group_norm", [](const Inputs& in) { return project(group_norm(in[0], 2, in[1], in[2])); },
        {random_tensor({2, 4, 3, 3}, rng), random_tensor({4}, rng), random_tensor({4}, rng)});
  const Tensor img = random_tensor({2, 3, 5, 4}, rng), k = random_tensor({2, 3, 3, 3}, rng);
  check("conv2d/stride1", [](const Inputs& in) { return project(conv2d(in[0], in[1], 1)); }, {img, k});
  check("conv2d/stride2", [](const Inputs& in) { return project(conv2d(in[0], in[1], 2)); }, {img, k});
  check("add_channel_bias", [](const Inputs& in) { return project(add_channel_bias(in[0], in[1])); },
        {img, random_tensor({3}, rng)});
  check("add_channel_embedding", [](const Inputs& in) { return project(add_channel_embedding(in[0], in[1])); },
        {img, random_tensor({2, 3}, rng)});
  check("upsample_nearest2x", [](const Inputs& in) { return project(upsample_nearest2x(in[0])); }, {img});
  check("concat", [](const Inputs& in) { return project(concat(in[0], in[1])); },
        {img, random_tensor({2, 2, 5, 4}, rng)});
  const NoiseSchedule s = NoiseSchedule::zero_terminal_snr();
  const std::vector<int> ts{1, 500, 1000};
  check("forward_diffuse", [&](const Inputs& in) { return project(forward_diffuse(in[0], in[1], ts, s)); }, {x.reshape({3, 5}), random_tensor({3, 5}, rng)});
  check("v_to_x0", [&](const Inputs& in) { return project(v_to_x0(in[0], in[1], ts, s)); }, {random_tensor({3, 5}, rng), random_tensor({3, 5}, rng)});

  Rng mrng(26);
  auto mlp = DenoiserModel::create(small_mlp(), mrng);
  {
    const std::vector<int> t{20, 400, 990};
    const std::vector<Conditioning> c{Conditioning::of(0), Conditioning::null(), Conditioning::of(2)};
    Inputs in{random_tensor({3, 2}, rng)};
    for (const auto& p : mlp->parameters().tensors()) in.push_back(p);
    check("Mlp2d", [&](const Inputs& i) { return project(mlp->forward(i[0], t, c)); }, in);
  }
  auto unet = DenoiserModel::create(small_unet(), mrng);
  {
    const std::vector<int> t{30, 700};
    const std::vector<Conditioning> c{Conditioning::of(1), Conditioning::null()};
    Inputs in{random_tensor({2, 1, 8, 8}, rng)};
    for (const auto& p : unet->parameters().tensors()) in.push_back(p);
    check("TinyUnet", [&](const Inputs& i) { return project(unet->forward(i[0], t, c)); }, in, 5e-2, 16);
  }
  double worst = 0.0;
  std::string worst_name, failing;
  for (const auto& [name, err] : errors) {
    if (err >= worst) {
      worst = err;
      worst_name = name;
    }
    if (!(err < kTol)) failing += " " + name;
  }
  const double secs = seconds_since(start);
  return {failing.empty() && secs < 60.0,
          format("%zu checks, worst relative error %.3g (%s, < %.0e)%s%s, %.1f s of 60 s", errors.size(), worst,
                 worst_name.c_str(), kTol, failing.empty() ? "" : "; failing:", failing.c_str(), secs)};
}

Outcome criterion_guidance() {
  const NoiseSchedule s = NoiseSchedule::zero_terminal_snr();
  Rng rng(27);
  auto model = DenoiserModel::create(small_mlp(), rng);
  const std::vector<Conditioning> c{Conditioning::of(0), Conditioning::of(1), Conditioning::of(2), Conditioning::of(1)};
  const Tensor x_T = random_tensor({4, 2}, rng);

  SamplerConfig w1;
  w1.steps = 25;
  const SampleTrajectory guided = sample_from(*model, x_T, c, w1, s);
  Tensor x = x_T;
  const auto grid = make_timestep_grid(w1.steps, s.timesteps());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const int next = i + 1 < grid.size() ? grid[i + 1] : 0;
    const std::vector<int> tv(4, grid[i]);
    x = ddim_step(x, model->forward(x, tv, c), grid[i], next, s);
  }
  const bool w1_exact = bit_equal(guided.sample, x) && guided.nfe == 25;

  SamplerConfig w3 = w1;
  w3.cfg_scale = 3.0;
  const long nfe_cfg = sample_from(*model, x_T, c, w3, s).nfe;

  bool phi0_identity = true;
  for (int i = 0; i < 20; ++i) {
    const Tensor vg = random_tensor({5, 7}, rng, 3.0f), vc = random_tensor({5, 7}, rng);
    phi0_identity = phi0_identity && bit_equal(cfg_rescale(vg, vc, 0.0), vg);
  }
  SamplerConfig w3phi0 = w3;
  w3phi0.rescale_phi = 0.0;
  phi0_identity = phi0_identity && bit_equal(sample_from(*model, x_T, c, w3phi0, s).sample,
                                             sample_from(*model, x_T, c, w3, s).sample);
  const bool ok = w1_exact && nfe_cfg == 50 && phi0_identity;
  return {ok, format("w=1 equals the conditional DDIM path bitwise %s (nfe %ld), 25 steps with guidance nfe %ld "
                     "(== 50), rescale phi=0 identity %s",
                     w1_exact ? "yes" : "NO", guided.nfe, nfe_cfg, phi0_identity ? "yes" : "NO")};
}

Outcome criterion_midpoint(const fs::path& work) {
  Rng rng(28);
  double worst_descent = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const int n = rng.uniform_int(2, 6);
    const std::size_t d = static_cast<std::size_t>(rng.uniform_int(1, 10));
    std::vector<Tensor> pts;
    for (int i = 0; i < n; ++i) pts.push_back(random_tensor({d}, rng, 2.0f));
    const Tensor mid = mse_midpoint(pts);
    // Gradient descent on the summed squared distance, in double precision.
    std::vector<double> m(d, 0.0);
    const double lr = 0.25 / n;
    for (int it = 0; it < 2000; ++it) {
      std::vector<double> g(d, 0.0);
      for (const auto& p : pts) {
        for (std::size_t j = 0; j < d; ++j) g[j] += 2.0 * (m[j] - p[j]);
      }
      for (std::size_t j = 0; j < d; ++j) m[j] -= lr * g[j];
    }
    for (std::size_t j = 0; j < d; ++j) worst_descent = std::max(worst_descent, std::abs(mid[j] - m[j]));
  }
  // The figure data written for two exemplars: rows a, midpoint, b.
  Rng drng(29);
  const FiniteDataset shapes = generate_dataset("shapes16", {{"n", 64}}, drng);
  const std::size_t per = shapes.dim();
  double worst_blend = 0.0;
  for (std::size_t i = 0; i + 1 < shapes.size(); i += 2) {
    const auto da = shapes.points.data().subspan(i * per, per), db = shapes.points.data().subspan((i + 1) * per, per);
    const Tensor a({1, 16, 16}, {da.begin(), da.end()}), b({1, 16, 16}, {db.begin(), db.end()});
    const fs::path dir = work / "midpoint";
    emit_midpoint_figure(dir, a, b, "acceptance");
    const Tensor rows = read_tensor_csv(dir / "midpoint.csv");
    for (std::size_t j = 0; j < per; ++j) {
      const double blend = 0.5 * (double(rows[j]) + double(rows[2 * per + j]));
      worst_blend = std::max(worst_blend, std::abs(double(rows[per + j]) - blend));
    }
  }
  const bool ok = worst_descent < 1e-4 && worst_blend < 1e-6;
  return {ok, format("midpoint vs descent %.3g (< 1e-4), shapes16 pixel blend deviation %.3g (< 1e-6)",
                     worst_descent, worst_blend)};
}

Outcome criterion_ablations(const fs::path& configs, const fs::path& work, double shared_seconds) {
  constexpr double kBudgetSeconds = 60 * 60;
  const auto start = std::chrono::steady_clock::now();
  const ExperimentConfig base = load_config(configs / "accept_shapes16.cfg", work / "c1", 0);
  const std::map<std::string, std::vector<std::string>> expected{
      {"tap",
       {"All Encoder Layers", "All Decoder Layers", "All Encoder Layers + Midblock Layer", "Only Midblock Layer"}},
      {"tprime_sampler", {"t'=t+-40", "t'~N(t,100)", "t'~U(1,T)"}},
      {"feature_distance", {"Mean Absolute Distance", "Mean Squared Distance"}},
      {"perceptual_source", {"MSE model as perceptual network", "SP model as perceptual network"}},
      {"cfg_scale",
       {"MSE cfg=7.5 rescale=0.7", "SP", "SP cfg=2 rescale=0.7", "SP cfg=3 rescale=0.7", "SP cfg=4 rescale=0.7",
        "SP cfg=7.5 rescale=0.7"}},
  };
  bool structure = true, finite = true, repeat_ok = false;
  std::string problems;
  const fs::path dir = work / "ablate";
  fs::create_directories(dir);
  for (const auto& axis : ablation_axes()) {
    const auto rows = run_ablation(axis, default_ablation_values(axis), base);
    write_ablation_csv(dir / ("ablation_" + axis + ".csv"), rows, config_hash(base));
    std::vector<std::string> labels;
    for (const auto& r : rows) {
      labels.push_back(r.label);
      const auto& m = r.row.result.metrics;
      const bool row_finite = std::isfinite(m.energy_distance) && std::isfinite(m.mmd_rbf);
      const long want_nfe = r.row.sampler.cfg_scale == 1.0 ? base.sampler.steps : 2L * base.sampler.steps;
      finite = finite && row_finite && r.row.result.nfe_per_sample == want_nfe;
      info("ablation %-18s %-40s ED %.6g  nfe %ld", axis.c_str(), r.label.c_str(), m.energy_distance,
           r.row.result.nfe_per_sample);
      if (axis == "perceptual_source" && r.value == "sp") {
        ExperimentConfig cfg = base;
        set_config_value(cfg, "sp.perceptual_source", "sp");
        repeat_ok = row_finite && fs::exists(Experiment(cfg).sp_checkpoint()) && cfg.perceptual_source == "sp" &&
                    config_hash(cfg) != config_hash(base);
      }
    }
    if (labels != expected.at(axis)) {
      structure = false;
      problems += " " + axis;
    }
  }
  const double secs = seconds_since(start) + shared_seconds;
  const bool ok = structure && finite && repeat_ok && secs < kBudgetSeconds;
  return {ok, format("rows match for every axis %s%s, metrics finite with expected nfe %s, repeat-SP trained %s, "
                     "%.0f s of %.0f s (including %.0f s shared MSE+SP training)",
                     structure ? "yes" : "NO:", problems.c_str(), finite ? "yes" : "NO", repeat_ok ? "yes" : "NO",
                     secs, kBudgetSeconds, shared_seconds)};
}

Outcome criterion_determinism(const fs::path& configs, const fs::path& work) {
  std::vector<MetricReport> reports;
  std::vector<std::string> hashes;
  for (const char* dir : {"c10a", "c10b"}) {
    ExperimentConfig cfg = load_config(configs / "accept_gauss8.cfg", work / dir, 3);
    cfg.mse.steps = 400;
    cfg.sp.steps = 100;
    cfg.eval_samples = 512;
    Experiment e(cfg);
    e.ensure_mse();
    e.ensure_sp();
    for (const auto& row : e.evaluate_all()) reports.push_back(row.result.metrics);
    hashes.push_back(e.hash());
  }
  bool metrics_equal = reports.size() == 4 && hashes[0] == hashes[1];
  for (std::size_t i = 0; metrics_equal && i < 2; ++i) {
    const auto &x = reports[i], &y = reports[i + 2];
    metrics_equal = bit_equal(x.energy_distance, y.energy_distance) && bit_equal(x.mmd_rbf, y.mmd_rbf) &&
                    bit_equal(x.nearest_neighbor_recall, y.nearest_neighbor_recall);
  }

  bool round_trip = true;
  Rng rng(30);
  for (const ModelSpec& spec : {small_mlp(), small_unet()}) {
    auto m = DenoiserModel::create(spec, rng);
    const fs::path path = work / ("roundtrip_" + to_string(spec.kind) + ".ckpt");
    save_model(path, *m);
    const auto back = load_model(path);
    const Shape shape = spec.kind == ModelKind::Mlp2d ? Shape{5, 2} : Shape{5, 1, 8, 8};
    const Tensor x = random_tensor(shape, rng);
    const std::vector<int> t{1, 10, 500, 999, 1000};
    const std::vector<Conditioning> c{Conditioning::of(0), Conditioning::null(), Conditioning::of(2),
                                      Conditioning::of(1), Conditioning::null()};
    round_trip = round_trip && bit_equal(m->forward(x, t, c), back->forward(x, t, c));
  }
  ExperimentConfig cfg = load_config(configs / "accept_gauss8.cfg", work / "c10a", 3);
  cfg.mse.steps = 400;
  cfg.sp.steps = 100;
  cfg.eval_samples = 512;
  const Experiment e(cfg);
  const auto trained = e.load_model("sp");
  const fs::path path = work / "roundtrip_trained.ckpt";
  save_model(path, *trained);
  const auto back = load_model(path);
  Rng xr(31);
  const Tensor x = random_tensor({64, 2}, xr);
  std::vector<int> t(64);
  std::vector<Conditioning> c(64);
  for (std::size_t i = 0; i < 64; ++i) {
    t[i] = xr.uniform_int(1, 1000);
    c[i] = i % 3 == 0 ? Conditioning::null() : Conditioning::of(int(i % 8));
  }
  round_trip = round_trip && bit_equal(trained->forward(x, t, c), back->forward(x, t, c));
  return {metrics_equal && round_trip,
          format("repeat run metrics bit-exact %s, checkpoint round trip forward bit-exact %s",
                 metrics_equal ? "yes" : "NO", round_trip ? "yes" : "NO")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"splab acceptance checks"};
  std::string configs = SPLAB_CONFIG_DIR;
  std::string work = "acceptance_runs";
  std::vector<int> only;
  bool keep = false;
  app.add_option("--configs", configs, "directory holding accept_*.cfg");
  app.add_option("--work-dir", work, "scratch directory for runs (wiped unless --keep)");
  app.add_option("--only", only, "criteria to run (default all)")->delimiter(',');
  app.add_flag("--keep", keep, "reuse runs left in the work directory (timings then understate)");
  CLI11_PARSE(app, argc, argv);

  const fs::path work_dir = fs::absolute(work);
  if (!keep) fs::remove_all(work_dir);
  fs::create_directories(work_dir);
  const std::set<int> selected(only.begin(), only.end());
  auto wanted = [&](int id) { return selected.empty() || selected.count(id) > 0; };

  const std::vector<std::string> names{"",
                                       "SP beats MSE on energy distance",
                                       "over-parameterized MSE model matches the posterior optimum",
                                       "SP re-noising equals a DDIM step",
                                       "algebraic identities",
                                       "schedule properties",
                                       "finite-difference gradients",
                                       "classifier-free guidance contracts",
                                       "MSE midpoint",
                                       "ablation tables and repeat-SP",
                                       "determinism and checkpoint round trip"};
  std::vector<std::pair<int, Outcome>> results;
  auto run = [&](int id, const std::function<Outcome()>& f) {
    if (!wanted(id)) return;
    info("running %d: %s", id, names[static_cast<std::size_t>(id)].c_str());
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    info("%d finished in %.1f s", id, seconds_since(start));
    results.emplace_back(id, o);
  };

  double shapes_seed0_seconds = 0.0;
  const fs::path cfg_dir(configs);
  run(3, criterion_renoise_is_ddim);
  run(4, criterion_identities);
  run(5, criterion_schedule);
  run(6, criterion_gradients);
  run(7, criterion_guidance);
  run(8, [&] { return criterion_midpoint(work_dir); });
  run(10, [&] { return criterion_determinism(cfg_dir, work_dir); });
  run(2, criterion_oracle_match);
  run(1, [&] { return criterion_sp_beats_mse(cfg_dir, work_dir, shapes_seed0_seconds); });
  run(9, [&] { return criterion_ablations(cfg_dir, work_dir, shapes_seed0_seconds); });

  std::sort(results.begin(), results.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  int failed = 0;
  for (const auto& [id, o] : results) {
    std::printf("%s C%d %s: %s\n", o.pass ? "PASS" : "FAIL", id, names[static_cast<std::size_t>(id)].c_str(),
                o.detail.c_str());
    failed += o.pass ? 0 : 1;
  }
  std::fflush(stdout);
  return failed == 0 ? 0 : 1;
}
