// splab command-line driver.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "splab/harness.hpp"

namespace fs = std::filesystem;
using namespace splab;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitNumerical = 2;

/// Config sources shared by every subcommand: a file, `--set key=value`
/// overrides, and one `--<key>` flag per config field.
struct ConfigArgs {
  std::string file;
  std::vector<std::string> sets;
  std::map<std::string, std::string> flags;

  void attach(CLI::App* app) {
    app->add_option("-c,--config", file, "flat key = value config file")->check(CLI::ExistingFile);
    app->add_option("--set", sets, "override as key=value (repeatable)");
    for (const auto& key : config_keys()) {
      app->add_option("--" + key, flags[key], "config key " + key);
    }
    for (const char* key : {"dataset.n", "dataset.radius", "dataset.std", "dataset.noise"}) {
      app->add_option(std::string("--") + key, flags[key], "dataset generator parameter");
    }
  }

  ExperimentConfig build() const {
    ExperimentConfig cfg = file.empty() ? ExperimentConfig{} : parse_config_file(file);
    for (const auto& [key, value] : flags) {
      if (!value.empty()) set_config_value(cfg, key, value);
    }
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
      set_config_value(cfg, s.substr(0, eq), s.substr(eq + 1));
    }
    cfg.validate();
    return cfg;
  }
};

/// Row i of an [N, ...] tensor as a [1, ...] tensor.
Tensor row_tensor(const Tensor& t, std::size_t i) {
  Shape one = t.shape();
  one[0] = 1;
  const std::size_t per = t.per_sample();
  const auto d = t.data().subspan(i * per, per);
  return Tensor(one, std::vector<float>(d.begin(), d.end()));
}

void print_rows(const std::vector<MetricRow>& rows) {
  for (const auto& r : rows) {
    std::printf("%-24s cfg=%-4g nfe=%-3ld energy_distance=%.6g mmd=%.6g nn_recall=%.4f\n", r.run_id.c_str(),
                r.sampler.cfg_scale, r.result.nfe_per_sample, r.result.metrics.energy_distance,
                r.result.metrics.mmd_rbf, r.result.metrics.nearest_neighbor_recall);
  }
}

int cmd_train(const ConfigArgs& args, const std::string& phase, bool figures) {
  const auto start = std::chrono::steady_clock::now();
  Experiment exp(args.build());
  std::printf("run %s -> %s\n", exp.hash().c_str(), exp.run_dir().string().c_str());
  if (phase == "mse" || phase == "all") {
    exp.ensure_mse();
    std::printf("mse checkpoint: %s\n", exp.mse_checkpoint().string().c_str());
  }
  if (phase == "sp" || phase == "all") {
    exp.ensure_sp();
    std::printf("sp checkpoint: %s\n", exp.sp_checkpoint().string().c_str());
  }
  print_rows(exp.evaluate_all());
  for (const auto& [phase, log] : {std::pair{"mse", exp.mse_dir() / "mse_log.csv"}, {"sp", exp.run_dir() / "sp_log.csv"}}) {
    if (auto r = plateau_report(log)) {
      std::printf("%s loss trend: %.4g -> %.4g over the last two fifths of the log (%+.1f%%, %s)\n", phase,
                  r->earlier_mean, r->final_mean, 100.0 * r->relative_change,
                  r->plateaued ? "levelled off" : "still moving");
    }
  }
  if (figures) {
    for (const auto& p : emit_figures(exp)) std::printf("wrote %s\n", p.string().c_str());
  }
  const double wall =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  exp.write_manifest(wall);
  return kExitOk;
}

int cmd_sample(const ConfigArgs& args, const std::string& which, int n, std::string out) {
  Experiment exp(args.build());
  const auto model = exp.load_model(which);
  std::vector<Conditioning> c(static_cast<std::size_t>(n), Conditioning::null());
  if (exp.config().conditional) {
    for (int i = 0; i < n; ++i) c[static_cast<std::size_t>(i)] = Conditioning::of(i % exp.model_spec().num_classes);
  }
  Rng rng(exp.config().seed, {6});
  const SampleTrajectory traj = sample(*model, c, exp.config().sampler, exp.schedule(), rng);
  if (out.empty()) out = (exp.run_dir() / ("samples_" + which + ".csv")).string();
  fs::create_directories(fs::path(out).parent_path());
  std::vector<int> labels;
  for (const auto& ci : c) labels.push_back(ci.class_id);
  write_tensor_csv(out, traj.sample, labels, exp.hash());
  std::printf("wrote %d samples (%ld NFE each) to %s\n", n, traj.nfe, out.c_str());
  return kExitOk;
}

int cmd_ablate(const ConfigArgs& args, const std::string& axis, const std::vector<std::string>& values) {
  const ExperimentConfig base = args.build();
  const std::string base_hash = config_hash(base);
  const fs::path dir = base.output_dir / ("ablate-" + base_hash);
  fs::create_directories(dir);
  const std::vector<std::string> axes = axis == "all" ? ablation_axes() : std::vector<std::string>{axis};
  for (const auto& a : axes) {
    const auto vals = values.empty() || axis == "all" ? default_ablation_values(a) : values;
    const auto rows = run_ablation(a, vals, base);
    const fs::path path = dir / ("ablation_" + a + ".csv");
    write_ablation_csv(path, rows, base_hash);
    std::printf("== %s (%s)\n", a.c_str(), path.string().c_str());
    for (const auto& r : rows) {
      std::printf("  %-40s energy_distance=%.6g mmd=%.6g nn_recall=%.4f\n", r.label.c_str(),
                  r.row.result.metrics.energy_distance, r.row.result.metrics.mmd_rbf,
                  r.row.result.metrics.nearest_neighbor_recall);
    }
  }
  return kExitOk;
}

int cmd_oracle_check(const ConfigArgs& args, int probes) {
  Experiment exp(args.build());
  exp.ensure_mse();
  const auto model = exp.load_model("mse");
  const OracleReport r = oracle_check(exp, *model, probes);
  std::printf("unconditional v vs posterior-optimal v (training set): mse=%.6g over %zu probes\n", r.mse_empirical,
              r.probes);
  if (!std::isnan(r.mse_mixture)) std::printf("unconditional v vs mixture-optimal v: mse=%.6g\n", r.mse_mixture);
  const auto& data = exp.data().train;
  if (data.points.rank() == 4 && data.size() >= 2) {
    const Tensor first = row_tensor(data.points, 0);
    const Tensor second = row_tensor(data.points, 1);
    emit_midpoint_figure(exp.run_dir() / "figures", first, second, exp.hash());
    std::printf("wrote midpoint figure to %s\n", (exp.run_dir() / "figures").string().c_str());
  }
  std::printf("wrote %s\n", r.csv.string().c_str());
  return kExitOk;
}

int cmd_metrics(const ConfigArgs& args, const std::string& reference, const std::string& generated) {
  if (!reference.empty() || !generated.empty()) {
    if (reference.empty() || generated.empty()) throw ConfigError("metrics needs both --reference and --generated");
    const MetricReport m = compute_metrics(read_tensor_csv(reference), read_tensor_csv(generated));
    std::printf("energy_distance,mmd_rbf,nn_recall\n%.17g,%.17g,%.17g\n", m.energy_distance, m.mmd_rbf,
                m.nearest_neighbor_recall);
    return kExitOk;
  }
  Experiment exp(args.build());
  print_rows(exp.evaluate_all());
  return kExitOk;
}

int cmd_dump_schedule(const ConfigArgs& args, const std::string& out) {
  const ExperimentConfig cfg = args.build();
  const NoiseSchedule s = make_schedule(cfg);
  auto write = [&](std::ostream& os) {
    os << "# config_hash=" << config_hash(cfg) << "\n";
    s.write_csv(os);
  };
  if (out.empty()) {
    write(std::cout);
  } else {
    std::ofstream f(out, std::ios::trunc);
    if (!f) throw ConfigError("cannot write " + out);
    write(f);
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"splab: self-perceptual diffusion lab"};
  app.require_subcommand(1);

  ConfigArgs train_args, sample_args, ablate_args, oracle_args, metrics_args, schedule_args;
  std::string phase = "all";
  bool no_figures = false;
  auto* train = app.add_subcommand("train", "train the MSE and/or SP phase, evaluate, emit figures");
  train_args.attach(train);
  train->add_option("--phase", phase, "mse, sp or all")->check(CLI::IsMember({"mse", "sp", "all"}));
  train->add_flag("--no-figures", no_figures, "skip figure data");

  std::string which = "sp", sample_out;
  int sample_n = 64;
  auto* samp = app.add_subcommand("sample", "draw samples from a trained model");
  sample_args.attach(samp);
  samp->add_option("--from", which, "model to sample: mse or sp")->check(CLI::IsMember({"mse", "sp"}));
  samp->add_option("-n,--count", sample_n, "number of samples")->check(CLI::PositiveNumber);
  samp->add_option("-o,--out", sample_out, "output CSV");

  std::string axis = "all";
  std::vector<std::string> values;
  auto* ablate = app.add_subcommand("ablate", "run an ablation sweep");
  ablate_args.attach(ablate);
  ablate->add_option("--axis", axis, "tap, tprime_sampler, feature_distance, perceptual_source, cfg_scale or all");
  ablate->add_option("--values", values, "values for a single axis")->delimiter(',');

  int probes = 512;
  auto* oracle = app.add_subcommand("oracle-check", "compare the MSE model with the analytic optimum");
  oracle_args.attach(oracle);
  oracle->add_option("--probes", probes, "number of (x_t, t) probes")->check(CLI::PositiveNumber);

  std::string reference, generated;
  auto* metrics = app.add_subcommand("metrics", "metrics of a run, or between two CSV files");
  metrics_args.attach(metrics);
  metrics->add_option("--reference", reference, "reference CSV")->check(CLI::ExistingFile);
  metrics->add_option("--generated", generated, "generated CSV")->check(CLI::ExistingFile);

  std::string schedule_out;
  auto* dump = app.add_subcommand("dump-schedule", "write the noise schedule as CSV");
  schedule_args.attach(dump);
  dump->add_option("-o,--out", schedule_out, "output file (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (train->parsed()) return cmd_train(train_args, phase, !no_figures);
    if (samp->parsed()) return cmd_sample(sample_args, which, sample_n, sample_out);
    if (ablate->parsed()) {
      if (axis != "all") default_ablation_values(axis);
      return cmd_ablate(ablate_args, axis, values);
    }
    if (oracle->parsed()) return cmd_oracle_check(oracle_args, probes);
    if (metrics->parsed()) return cmd_metrics(metrics_args, reference, generated);
    if (dump->parsed()) return cmd_dump_schedule(schedule_args, schedule_out);
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical abort: %s\n", e.what());
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitConfig;
  }
  return kExitOk;
}
