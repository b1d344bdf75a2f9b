#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "splab/checkpoint.hpp"
#include "splab/config.hpp"
#include "splab/models.hpp"
#include "splab/optim.hpp"
#include "splab/oracles.hpp"
#include "splab/sampler.hpp"
#include "splab/schedule.hpp"

namespace splab {

/// Content hash of the library sources this binary was built from.
std::string code_version();

/// Online weights, their EMA and the optimizer state of one training phase.
struct TrainingState {
  std::unique_ptr<DenoiserModel> online;
  std::unique_ptr<DenoiserModel> ema;
  AdamState adam;
  int step = 0;  // completed optimizer steps

  /// Online and EMA weights both start as copies of `init`.
  static TrainingState start_from(const DenoiserModel& init);
  Checkpoint to_checkpoint(std::map<std::string, std::string> meta) const;
  static TrainingState from_checkpoint(const Checkpoint& ckpt);
};

enum class Objective { Mse, SelfPerceptual };

struct PhaseOptions {
  Objective objective = Objective::Mse;
  int phase = 1;  // selects the random stream; distinct per training phase
  int steps = 100;
  double lr = 3e-4;
  int batch = 256;
  double ema_decay = 0.999;
  /// Labels are dropped to the null class with this probability; ignored
  /// when `conditional` is false (every query is then null).
  double cond_dropout = 0.1;
  bool conditional = true;
  SpConfig sp;
  int checkpoint_every = 0;  // 0: only the final checkpoint
  int log_every = 50;
  std::uint64_t seed = 0;
  std::string config_hash;
  /// Checkpoint file (rewritten atomically) and CSV log.
  std::filesystem::path checkpoint_path;
  std::filesystem::path log_path;
};

struct PhaseResult {
  std::vector<double> losses;  // one per step run in this call
  double wall_ms = 0.0;
};

/// Runs optimizer steps state.step + 1 .. opts.steps. Step k draws all of its
/// randomness from Rng(seed, {phase, k}), so a run resumed from a checkpoint
/// continues with exactly the losses of an uninterrupted one. The SP objective
/// requires `frozen`. A non-finite loss or gradient throws NumericalError and
/// leaves the last written checkpoint in place.
PhaseResult train_phase(TrainingState& state, const FiniteDataset& data, const DenoiserModel* frozen,
                        const NoiseSchedule& s, const PhaseOptions& opts);

struct DatasetSplit {
  FiniteDataset train;
  FiniteDataset heldout;
};

/// Training and held-out sets for a config. Builtin generators draw the two
/// sets from independent streams; image directories are shuffled and split.
DatasetSplit load_datasets(const ExperimentConfig& cfg);

/// Model spec with data-dependent fields (classes, sizes) filled in.
ModelSpec resolve_model_spec(const ExperimentConfig& cfg, const FiniteDataset& data);

NoiseSchedule make_schedule(const ExperimentConfig& cfg);

struct EvalResult {
  MetricReport metrics;
  long nfe_per_sample = 0;
  Tensor samples;
  std::vector<Conditioning> conditioning;
};

struct MetricRow {
  std::string run_id;
  std::string config_hash;
  std::string model;  // "mse" or "sp"
  std::string weights;
  SamplerConfig sampler;
  EvalResult result;
};

/// One two-phase experiment rooted at output_dir/<config hash>. The MSE phase
/// lives in output_dir/mse-<phase hash> so configs that differ only in SP or
/// sampler settings share it.
class Experiment {
 public:
  explicit Experiment(ExperimentConfig cfg);

  const ExperimentConfig& config() const { return cfg_; }
  const std::string& hash() const { return hash_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  const DatasetSplit& data() const { return data_; }
  const ModelSpec& model_spec() const { return spec_; }
  std::filesystem::path run_dir() const;
  std::filesystem::path mse_dir() const;
  std::filesystem::path mse_checkpoint() const;
  std::filesystem::path sp_checkpoint() const;

  /// Trains phase 1, resuming a partial checkpoint and reusing a finished one.
  PhaseResult ensure_mse();
  /// Trains phase 2. Throws ConfigError when no finished phase-1 checkpoint exists.
  PhaseResult ensure_sp();
  /// Lets `longer`, a config that differs only by running more MSE steps,
  /// resume from this experiment's finished MSE phase. Step k of the phase
  /// does not depend on the total step count, so the result is identical to
  /// training `longer` from scratch. No-op when `longer` already has a checkpoint.
  void seed_longer_mse(const Experiment& longer) const;

  /// Evaluation weights ("ema" or "online" per config) of "mse" or "sp".
  std::unique_ptr<DenoiserModel> load_model(const std::string& which) const;

  /// eval.samples samples from fixed starting noise (shared by every model of
  /// this config) compared against the held-out set.
  EvalResult evaluate(const DenoiserModel& model, const SamplerConfig& sampler) const;
  /// Evaluates every finished phase with the configured sampler and writes metrics.csv.
  std::vector<MetricRow> evaluate_all();

  /// Writes config.txt and manifest.json (deterministic content) plus timing.json.
  void write_manifest(double wall_ms) const;

 private:
  PhaseOptions phase_options(Objective objective, int phase) const;
  PhaseResult run_phase(TrainingState state, const DenoiserModel* frozen, const PhaseOptions& opts);

  ExperimentConfig cfg_;
  std::string hash_;
  NoiseSchedule schedule_;
  DatasetSplit data_;
  ModelSpec spec_;
  std::vector<std::filesystem::path> outputs_;
};

struct OracleReport {
  double mse_empirical = 0.0;  // vs the posterior over the training set
  double mse_mixture = 0.0;    // vs the generating mixture (NaN when not applicable)
  std::size_t probes = 0;
  std::filesystem::path csv;
};

/// Null-conditioned v predictions at `probes` random (x0 from the training
/// set, eps, t) tuples with alpha_bar(t) in [0.05, 0.95], compared with the
/// analytic optimum. Writes run_dir/oracle_check.csv.
OracleReport oracle_check(const Experiment& exp, const DenoiserModel& model, int probes);

/// Loss trend of a phase from its CSV log: the mean logged loss over the last
/// fifth of the logged rows against the fifth before it. Training runs for a
/// fixed step budget; this only reports whether the loss has levelled off.
struct PlateauReport {
  std::size_t logged = 0;
  double earlier_mean = 0.0;
  double final_mean = 0.0;
  double relative_change = 0.0;  // (final - earlier) / |earlier|
  bool plateaued = false;        // |relative_change| < 0.05
};

/// nullopt when the log is missing or has fewer than 10 rows.
std::optional<PlateauReport> plateau_report(const std::filesystem::path& log);

/// Completed-step count stored in a training checkpoint, or nullopt when the file is absent.
std::optional<int> checkpoint_step(const std::filesystem::path& path);

void write_metric_rows(const std::filesystem::path& path, const std::vector<MetricRow>& rows);

// ---------------------------------------------------------------------------
// Ablations

struct AblationRow {
  std::string axis;
  std::string value;
  std::string label;  // row caption
  MetricRow row;
};

/// Axes: tap, tprime_sampler, feature_distance, perceptual_source, cfg_scale.
std::vector<std::string> ablation_axes();
std::vector<std::string> default_ablation_values(const std::string& axis);

/// Trains (or reuses) one SP run per value and evaluates it. The cfg_scale
/// axis only re-samples: it evaluates the SP model at each scale (guidance
/// rescale 0.7 above 1) after a reference row for the MSE model at 7.5/0.7.
std::vector<AblationRow> run_ablation(const std::string& axis, const std::vector<std::string>& values,
                                      const ExperimentConfig& base);
void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows,
                        const std::string& base_hash);

// ---------------------------------------------------------------------------
// Figures

/// Sample scatter/grid, x0-prediction strips and a data reference for each
/// finished model of the experiment; returns the written paths.
std::vector<std::filesystem::path> emit_figures(Experiment& exp);

/// Writes a - midpoint - b as one PGM strip plus the midpoint as CSV, and
/// returns the midpoint.
Tensor emit_midpoint_figure(const std::filesystem::path& dir, const Tensor& a, const Tensor& b,
                            const std::string& config_hash);

/// Writes [N, ...] rows as CSV with a `# config_hash=` line.
void write_tensor_csv(const std::filesystem::path& path, const Tensor& rows, const std::vector<int>& labels,
                      const std::string& config_hash);
/// Reads rows written by write_tensor_csv (or any numeric CSV with a header).
Tensor read_tensor_csv(const std::filesystem::path& path);

}  // namespace splab
