#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "splab/datasets.hpp"
#include "splab/models.hpp"
#include "splab/objectives.hpp"
#include "splab/sampler.hpp"

namespace splab {

struct PhaseSettings {
  int steps = 5000;
  double lr = 0.0;  // 0 selects the model-kind default
  int batch = 256;
};

/// Everything that determines a run. Flat `key = value` files map onto these
/// fields one to one (see config_keys()).
struct ExperimentConfig {
  std::string dataset = "gauss_mixture_8";
  DatasetParams dataset_params;
  std::string image_dir;  // when set, replaces the builtin generator
  int heldout = 2048;
  bool conditional = true;

  ModelSpec model;
  int timesteps = 1000;
  double beta_start = 0.00085;
  double beta_end = 0.012;

  PhaseSettings mse;
  PhaseSettings sp;
  SpConfig sp_objective;
  /// "mse": the frozen network is the phase-1 model. "sp": a first SP phase
  /// runs as usual, then its result is frozen and SP training is repeated.
  std::string perceptual_source = "mse";
  double ema_decay = 0.999;

  SamplerConfig sampler;
  int eval_samples = 2048;
  bool eval_ema = true;

  int checkpoint_every = 1000;
  int log_every = 50;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "runs";

  /// Learning rate after resolving the model-kind default.
  double mse_lr() const;
  double sp_lr() const;
  void validate() const;
};

/// Sets one field from its textual value. Throws ConfigError for unknown keys
/// or unparsable values.
void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value);
/// Reads `key = value` lines; '#' starts a comment.
ExperimentConfig parse_config_file(const std::filesystem::path& path);
ExperimentConfig parse_config_text(const std::string& text);

/// All settable keys in canonical order.
std::vector<std::string> config_keys();

/// Canonical `key=value` lines (sorted, defaults resolved, output_dir
/// excluded) from which the hash is computed.
std::string canonical_config(const ExperimentConfig& cfg);
/// 16 hex digits of FNV-1a 64 over canonical_config().
std::string config_hash(const ExperimentConfig& cfg);
/// Hash over only the fields that influence phase-1 training, so runs that
/// differ in SP or sampler settings share one MSE checkpoint.
std::string mse_phase_hash(const ExperimentConfig& cfg);

std::string fnv1a64_hex(const std::string& text);

}  // namespace splab
