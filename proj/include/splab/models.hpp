#pragma once

#include <array>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "splab/rng.hpp"
#include "splab/tensor.hpp"

namespace splab {

enum class ModelKind { Mlp2d = 0, TinyUnet = 1 };

/// Which hidden activations the perceptual loss compares.
enum class FeatureTap { EncoderAll, DecoderAll, EncoderPlusMid, MidOnly };

std::string to_string(ModelKind kind);
std::string to_string(FeatureTap tap);
ModelKind parse_model_kind(const std::string& name);
FeatureTap parse_feature_tap(const std::string& name);

/// Class label, or the reserved null label used for conditional dropout and
/// the unconditional branch of guidance.
struct Conditioning {
  static constexpr int kNull = -1;
  int class_id = kNull;

  static Conditioning null() { return {}; }
  static Conditioning of(int id) { return Conditioning{id}; }
  bool is_null() const { return class_id == kNull; }
  bool operator==(const Conditioning&) const = default;
};

struct ModelSpec {
  ModelKind kind = ModelKind::Mlp2d;
  int num_classes = 0;
  int timesteps = 1000;
  int time_embed_dim = 32;
  int class_embed_dim = 32;
  // Mlp2d
  int data_dim = 2;
  int hidden = 256;
  // TinyUnet
  int image_size = 16;
  int in_channels = 1;
  std::array<int, 3> channels{32, 64, 128};
  int groups = 8;
  int cond_dim = 128;

  bool operator==(const ModelSpec&) const = default;
};

/// Ordered named parameter list.
class ParameterSet {
 public:
  Tensor& add(std::string name, Tensor value);
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  std::size_t size() const { return items_.size(); }
  std::size_t total_elements() const;
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  std::vector<std::pair<std::string, Tensor>>& items() { return items_; }
  std::vector<Tensor> tensors() const;

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

struct ForwardOutput {
  Tensor v;                       // undefined when only features were requested
  std::vector<Tensor> features;  // empty when no tap was requested
};

/// Sinusoidal embedding of t / T (scaled to a 1000-step clock): the first half
/// holds sines, the second half cosines. Shape [dim].
std::vector<float> time_embedding(int t, int dim, int timesteps = 1000);
/// Batched time embedding, shape [t.size(), dim].
Tensor time_embedding(std::span<const int> t, int dim, int timesteps = 1000);

/// The trainable v-prediction network f(x_t, t, c).
class DenoiserModel {
 public:
  virtual ~DenoiserModel() = default;

  static std::unique_ptr<DenoiserModel> create(const ModelSpec& spec, Rng& rng);

  const ModelSpec& spec() const { return spec_; }
  ModelKind kind() const { return spec_.kind; }
  int num_classes() const { return spec_.num_classes; }
  /// Index of the learned null-class embedding row.
  int null_index() const { return spec_.num_classes; }
  /// Per-sample shape of x_t (e.g. [2] or [1, 16, 16]).
  Shape sample_shape() const;

  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }

  /// Predicts v for a batch x_t[B, ...] with one timestep and one label per sample.
  Tensor forward(const Tensor& x_t, std::span<const int> t, std::span<const Conditioning> c) const;
  /// Forward pass that also returns the activations named by `tap`.
  ForwardOutput forward_with_features(const Tensor& x_t, std::span<const int> t,
                                      std::span<const Conditioning> c, FeatureTap tap) const;
  /// Activations named by `tap` only; stops once the last requested tap is computed.
  std::vector<Tensor> features(const Tensor& x_t, std::span<const int> t, std::span<const Conditioning> c,
                               FeatureTap tap) const;

  /// Deep copy with identical parameter values and trainability.
  std::unique_ptr<DenoiserModel> clone() const;
  /// True when no parameter requires gradients.
  bool frozen() const;
  void set_trainable(bool trainable);
  void zero_grad();

 protected:
  explicit DenoiserModel(ModelSpec spec) : spec_(std::move(spec)) {}

  /// Runs the network. When `want_output` is false the pass may stop after the
  /// deepest requested tap.
  virtual ForwardOutput run(const Tensor& x_t, std::span<const int> t, std::span<const int> labels,
                            std::optional<FeatureTap> tap, bool want_output) const = 0;

  ModelSpec spec_;
  ParameterSet params_;

 private:
  std::vector<int> label_indices(std::span<const Conditioning> c, std::size_t batch) const;
  void check_input(const Tensor& x_t, std::span<const int> t) const;
};

/// Frozen deep copy used as the perceptual network. Gradients still flow
/// through it to its inputs, but never into its parameters.
std::unique_ptr<DenoiserModel> freeze_copy(const DenoiserModel& model);

/// Copies parameter values from `src` into `dst` (same spec required).
void copy_parameters(const DenoiserModel& src, DenoiserModel& dst);

/// Broadcast a single conditioning to a batch.
std::vector<Conditioning> repeat_conditioning(Conditioning c, std::size_t batch);

}  // namespace splab
