#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "splab/models.hpp"
#include "splab/tensor.hpp"

namespace splab {

/// On-disk layout (all integers little-endian u32 unless noted):
///   magic "SPLABCKP" (8 bytes), version, model kind,
///   meta count, then (key length, key bytes, value length, value bytes) per entry,
///   tensor count, then (name length, name bytes, rank, dims..., f32 payload) per tensor.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  ModelKind kind = ModelKind::Mlp2d;
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& tensor(const std::string& name) const;
  bool has_tensor(const std::string& name) const;
  const std::string& meta_value(const std::string& key) const;
};

/// Writes to a temporary file and renames it into place, so an interrupted
/// write never replaces a good checkpoint.
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
/// Throws ConfigError when the file is missing, truncated or has the wrong magic/version.
Checkpoint read_checkpoint(const std::filesystem::path& path);

void put_model_spec(std::map<std::string, std::string>& meta, const ModelSpec& spec);
ModelSpec get_model_spec(const std::map<std::string, std::string>& meta);

/// Appends the model's parameters under `prefix` (e.g. "ema/").
void append_parameters(Checkpoint& ckpt, const DenoiserModel& model, const std::string& prefix);
/// Copies tensors named prefix + parameter name into the model.
void load_parameters(const Checkpoint& ckpt, DenoiserModel& model, const std::string& prefix);

/// Builds a model from the spec stored in the checkpoint and the tensors under `prefix`.
std::unique_ptr<DenoiserModel> model_from_checkpoint(const Checkpoint& ckpt, const std::string& prefix);

/// Single-model checkpoint with parameters stored without a prefix.
void save_model(const std::filesystem::path& path, const DenoiserModel& model,
                std::map<std::string, std::string> meta = {});
std::unique_ptr<DenoiserModel> load_model(const std::filesystem::path& path);

}  // namespace splab
