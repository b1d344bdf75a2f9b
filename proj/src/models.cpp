#include "splab/models.hpp"

#include <cmath>
#include <numbers>

namespace splab {

std::string to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::Mlp2d: return "mlp2d";
    case ModelKind::TinyUnet: return "tiny_unet";
  }
  return "unknown";
}

std::string to_string(FeatureTap tap) {
  switch (tap) {
    case FeatureTap::EncoderAll: return "encoder_all";
    case FeatureTap::DecoderAll: return "decoder_all";
    case FeatureTap::EncoderPlusMid: return "encoder_plus_mid";
    case FeatureTap::MidOnly: return "mid_only";
  }
  return "unknown";
}

ModelKind parse_model_kind(const std::string& name) {
  if (name == "mlp2d") return ModelKind::Mlp2d;
  if (name == "tiny_unet") return ModelKind::TinyUnet;
  throw ConfigError("unknown model kind '" + name + "' (expected mlp2d or tiny_unet)");
}

FeatureTap parse_feature_tap(const std::string& name) {
  if (name == "encoder_all") return FeatureTap::EncoderAll;
  if (name == "decoder_all") return FeatureTap::DecoderAll;
  if (name == "encoder_plus_mid") return FeatureTap::EncoderPlusMid;
  if (name == "mid_only") return FeatureTap::MidOnly;
  throw ConfigError("unknown feature tap '" + name + "'");
}

// ---------------------------------------------------------------------------

Tensor& ParameterSet::add(std::string name, Tensor value) {
  for (const auto& [n, _] : items_) {
    if (n == name) throw ContractError("parameter '" + name + "' registered twice");
  }
  items_.emplace_back(std::move(name), std::move(value));
  return items_.back().second;
}

const Tensor& ParameterSet::at(const std::string& name) const {
  for (const auto& [n, t] : items_) {
    if (n == name) return t;
  }
  throw ContractError("no parameter named '" + name + "'");
}

Tensor& ParameterSet::at(const std::string& name) {
  return const_cast<Tensor&>(static_cast<const ParameterSet&>(*this).at(name));
}

std::size_t ParameterSet::total_elements() const {
  std::size_t n = 0;
  for (const auto& [_, t] : items_) n += t.numel();
  return n;
}

std::vector<Tensor> ParameterSet::tensors() const {
  std::vector<Tensor> out;
  out.reserve(items_.size());
  for (const auto& [_, t] : items_) out.push_back(t);
  return out;
}

// ---------------------------------------------------------------------------

std::vector<float> time_embedding(int t, int dim, int timesteps) {
  if (dim <= 0 || dim % 2 != 0) throw ConfigError("time_embedding: dimension must be positive and even");
  const int half = dim / 2;
  const double position = 1000.0 * static_cast<double>(t) / static_cast<double>(timesteps);
  std::vector<float> e(static_cast<std::size_t>(dim));
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    e[static_cast<std::size_t>(i)] = static_cast<float>(std::sin(position * freq));
    e[static_cast<std::size_t>(i + half)] = static_cast<float>(std::cos(position * freq));
  }
  return e;
}

Tensor time_embedding(std::span<const int> t, int dim, int timesteps) {
  std::vector<float> data;
  data.reserve(t.size() * static_cast<std::size_t>(dim));
  for (int ti : t) {
    auto e = time_embedding(ti, dim, timesteps);
    data.insert(data.end(), e.begin(), e.end());
  }
  return Tensor({t.size(), static_cast<std::size_t>(dim)}, std::move(data));
}

namespace {

Tensor kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<float> data(shape_numel(shape));
  for (auto& v : data) v = static_cast<float>((2.0 * rng.uniform() - 1.0) * bound);
  return Tensor(std::move(shape), std::move(data), true);
}

Tensor normal_init(Shape shape, Rng& rng) {
  Tensor t = Tensor::randn(std::move(shape), rng);
  t.set_requires_grad(true);
  return t;
}

bool needs_decoder(FeatureTap tap) { return tap == FeatureTap::DecoderAll; }

// ---------------------------------------------------------------------------
// Four-layer SiLU MLP over concat(x_t, time embedding, class embedding).
// Layers 1-2 are the "encoder", layer 2 doubles as the midblock, layers 3-4
// are the "decoder".

class Mlp2d final : public DenoiserModel {
 public:
  Mlp2d(const ModelSpec& spec, Rng& rng) : DenoiserModel(spec) {
    const auto d = static_cast<std::size_t>(spec.data_dim);
    const auto h = static_cast<std::size_t>(spec.hidden);
    const auto in = d + static_cast<std::size_t>(spec.time_embed_dim + spec.class_embed_dim);
    params_.add("class_embed", normal_init({static_cast<std::size_t>(spec.num_classes + 1),
                                            static_cast<std::size_t>(spec.class_embed_dim)}, rng));
    std::size_t fan_in = in;
    for (int layer = 1; layer <= 4; ++layer) {
      const std::string p = "layer" + std::to_string(layer);
      params_.add(p + ".weight", kaiming_uniform({fan_in, h}, fan_in, rng));
      params_.add(p + ".bias", Tensor::zeros({h}, true));
      fan_in = h;
    }
    params_.add("out.weight", kaiming_uniform({h, d}, h, rng));
    params_.add("out.bias", Tensor::zeros({d}, true));
  }

 protected:
  ForwardOutput run(const Tensor& x_t, std::span<const int> t, std::span<const int> labels,
                    std::optional<FeatureTap> tap, bool want_output) const override {
    Tensor temb = time_embedding(t, spec_.time_embed_dim, spec_.timesteps);
    Tensor cemb = embedding(params_.at("class_embed"), labels);
    Tensor h = concat(concat(x_t, temb), cemb);
    std::array<Tensor, 4> acts;
    const int last_layer = (!want_output && tap && !needs_decoder(*tap)) ? 2 : 4;
    for (int layer = 1; layer <= last_layer; ++layer) {
      const std::string p = "layer" + std::to_string(layer);
      h = silu(linear(h, params_.at(p + ".weight"), params_.at(p + ".bias")));
      acts[static_cast<std::size_t>(layer - 1)] = h;
    }
    ForwardOutput out;
    if (tap) {
      switch (*tap) {
        case FeatureTap::EncoderAll:
        case FeatureTap::EncoderPlusMid: out.features = {acts[0], acts[1]}; break;
        case FeatureTap::MidOnly: out.features = {acts[1]}; break;
        case FeatureTap::DecoderAll: out.features = {acts[2], acts[3]}; break;
      }
    }
    if (want_output) out.v = linear(h, params_.at("out.weight"), params_.at("out.bias"));
    return out;
  }
};

// ---------------------------------------------------------------------------
// Three-resolution U-Net: one residual block per stage, stride-2 conv
// downsampling, nearest-neighbour upsample + conv, skip concatenation.

class TinyUnet final : public DenoiserModel {
 public:
  TinyUnet(const ModelSpec& spec, Rng& rng) : DenoiserModel(spec) {
    if (spec.image_size % 4 != 0) throw ConfigError("tiny_unet: image size must be divisible by 4");
    for (int c : spec.channels) {
      if (c <= 0 || c % spec.groups != 0) {
        throw ConfigError("tiny_unet: channel width " + std::to_string(c) + " not divisible by " +
                          std::to_string(spec.groups) + " groups");
      }
    }
    const auto e = static_cast<std::size_t>(spec.cond_dim);
    const auto te = static_cast<std::size_t>(spec.time_embed_dim);
    const auto cin = static_cast<std::size_t>(spec.in_channels);
    const auto c0 = static_cast<std::size_t>(spec.channels[0]);
    const auto c1 = static_cast<std::size_t>(spec.channels[1]);
    const auto c2 = static_cast<std::size_t>(spec.channels[2]);

    params_.add("time_mlp1.weight", kaiming_uniform({te, e}, te, rng));
    params_.add("time_mlp1.bias", Tensor::zeros({e}, true));
    params_.add("time_mlp2.weight", kaiming_uniform({e, e}, e, rng));
    params_.add("time_mlp2.bias", Tensor::zeros({e}, true));
    params_.add("class_embed", normal_init({static_cast<std::size_t>(spec.num_classes + 1), e}, rng));

    add_conv("in_conv", c0, cin, rng);
    add_resblock("enc0", c0, rng);
    add_conv("down0", c1, c0, rng);
    add_resblock("enc1", c1, rng);
    add_conv("down1", c2, c1, rng);
    add_resblock("mid", c2, rng);
    add_conv("up1", c1, c2, rng);
    add_conv("merge1", c1, 2 * c1, rng);
    add_resblock("dec1", c1, rng);
    add_conv("up0", c0, c1, rng);
    add_conv("merge0", c0, 2 * c0, rng);
    add_resblock("dec0", c0, rng);
    add_norm("out_norm", c0);
    add_conv("out_conv", cin, c0, rng);
  }

 protected:
  ForwardOutput run(const Tensor& x_t, std::span<const int> t, std::span<const int> labels,
                    std::optional<FeatureTap> tap, bool want_output) const override {
    Tensor temb = time_embedding(t, spec_.time_embed_dim, spec_.timesteps);
    Tensor cond = linear(silu(linear(temb, params_.at("time_mlp1.weight"), params_.at("time_mlp1.bias"))),
                         params_.at("time_mlp2.weight"), params_.at("time_mlp2.bias"));
    cond = silu(add(cond, embedding(params_.at("class_embed"), labels)));

    Tensor h = conv("in_conv", x_t, 1);
    Tensor enc0 = resblock("enc0", h, cond);
    Tensor enc1 = resblock("enc1", conv("down0", enc0, 2), cond);
    Tensor mid = resblock("mid", conv("down1", enc1, 2), cond);

    ForwardOutput out;
    const bool decode = want_output || (tap && needs_decoder(*tap));
    if (tap && !needs_decoder(*tap)) {
      switch (*tap) {
        case FeatureTap::EncoderAll: out.features = {enc0, enc1}; break;
        case FeatureTap::EncoderPlusMid: out.features = {enc0, enc1, mid}; break;
        case FeatureTap::MidOnly: out.features = {mid}; break;
        case FeatureTap::DecoderAll: break;
      }
    }
    if (!decode) return out;

    Tensor up1 = conv("up1", upsample_nearest2x(mid), 1);
    Tensor dec1 = resblock("dec1", conv("merge1", concat(up1, enc1), 1), cond);
    Tensor up0 = conv("up0", upsample_nearest2x(dec1), 1);
    Tensor dec0 = resblock("dec0", conv("merge0", concat(up0, enc0), 1), cond);
    if (tap && needs_decoder(*tap)) out.features = {dec1, dec0};
    if (want_output) out.v = conv("out_conv", silu(norm("out_norm", dec0)), 1);
    return out;
  }

 private:
  void add_conv(const std::string& name, std::size_t cout, std::size_t cin, Rng& rng) {
    params_.add(name + ".weight", kaiming_uniform({cout, cin, 3, 3}, cin * 9, rng));
    params_.add(name + ".bias", Tensor::zeros({cout}, true));
  }

  void add_norm(const std::string& name, std::size_t c) {
    params_.add(name + ".gamma", Tensor::full({c}, 1.0f, true));
    params_.add(name + ".beta", Tensor::zeros({c}, true));
  }

  void add_resblock(const std::string& name, std::size_t c, Rng& rng) {
    const auto e = static_cast<std::size_t>(spec_.cond_dim);
    add_norm(name + ".norm1", c);
    add_conv(name + ".conv1", c, c, rng);
    params_.add(name + ".cond.weight", kaiming_uniform({e, c}, e, rng));
    params_.add(name + ".cond.bias", Tensor::zeros({c}, true));
    add_norm(name + ".norm2", c);
    add_conv(name + ".conv2", c, c, rng);
  }

  Tensor conv(const std::string& name, const Tensor& x, int stride) const {
    return add_channel_bias(conv2d(x, params_.at(name + ".weight"), stride), params_.at(name + ".bias"));
  }

  Tensor norm(const std::string& name, const Tensor& x) const {
    return group_norm(x, static_cast<std::size_t>(spec_.groups), params_.at(name + ".gamma"),
                      params_.at(name + ".beta"));
  }

  Tensor resblock(const std::string& name, const Tensor& x, const Tensor& cond) const {
    Tensor h = conv(name + ".conv1", silu(norm(name + ".norm1", x)), 1);
    h = add_channel_embedding(h, linear(cond, params_.at(name + ".cond.weight"), params_.at(name + ".cond.bias")));
    h = conv(name + ".conv2", silu(norm(name + ".norm2", h)), 1);
    return add(x, h);
  }
};

}  // namespace

// ---------------------------------------------------------------------------

std::unique_ptr<DenoiserModel> DenoiserModel::create(const ModelSpec& spec, Rng& rng) {
  if (spec.num_classes < 0) throw ConfigError("model: num_classes must be non-negative");
  if (spec.timesteps < 1) throw ConfigError("model: timesteps must be positive");
  if (spec.time_embed_dim <= 0 || spec.time_embed_dim % 2 != 0) {
    throw ConfigError("model: time_embed_dim must be positive and even");
  }
  switch (spec.kind) {
    case ModelKind::Mlp2d:
      if (spec.data_dim <= 0 || spec.hidden <= 0 || spec.class_embed_dim <= 0) {
        throw ConfigError("mlp2d: dimensions must be positive");
      }
      return std::make_unique<Mlp2d>(spec, rng);
    case ModelKind::TinyUnet: return std::make_unique<TinyUnet>(spec, rng);
  }
  throw ConfigError("model: unknown kind");
}

Shape DenoiserModel::sample_shape() const {
  if (spec_.kind == ModelKind::Mlp2d) return {static_cast<std::size_t>(spec_.data_dim)};
  const auto s = static_cast<std::size_t>(spec_.image_size);
  return {static_cast<std::size_t>(spec_.in_channels), s, s};
}

void DenoiserModel::check_input(const Tensor& x_t, std::span<const int> t) const {
  const Shape per = sample_shape();
  if (x_t.rank() != per.size() + 1 || !std::equal(per.begin(), per.end(), x_t.shape().begin() + 1)) {
    throw ContractError(to_string(kind()) + ": input " + shape_str(x_t.shape()) + " does not match sample shape " +
                        shape_str(per));
  }
  if (t.size() != x_t.dim(0)) throw ContractError(to_string(kind()) + ": need one timestep per sample");
  for (int ti : t) {
    if (ti < 1 || ti > spec_.timesteps) {
      throw ContractError(to_string(kind()) + ": timestep " + std::to_string(ti) + " outside [1, " +
                          std::to_string(spec_.timesteps) + "]");
    }
  }
}

std::vector<int> DenoiserModel::label_indices(std::span<const Conditioning> c, std::size_t batch) const {
  if (c.size() != batch && c.size() != 1) throw ContractError("model: need one conditioning per sample");
  std::vector<int> out(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    const Conditioning& ci = c.size() == 1 ? c[0] : c[i];
    if (ci.is_null()) {
      out[i] = null_index();
    } else if (ci.class_id >= 0 && ci.class_id < spec_.num_classes) {
      out[i] = ci.class_id;
    } else {
      throw ContractError("model: class id " + std::to_string(ci.class_id) + " outside [0, " +
                          std::to_string(spec_.num_classes) + ")");
    }
  }
  return out;
}

Tensor DenoiserModel::forward(const Tensor& x_t, std::span<const int> t, std::span<const Conditioning> c) const {
  check_input(x_t, t);
  return run(x_t, t, label_indices(c, x_t.dim(0)), std::nullopt, true).v;
}

ForwardOutput DenoiserModel::forward_with_features(const Tensor& x_t, std::span<const int> t,
                                                   std::span<const Conditioning> c, FeatureTap tap) const {
  check_input(x_t, t);
  return run(x_t, t, label_indices(c, x_t.dim(0)), tap, true);
}

std::vector<Tensor> DenoiserModel::features(const Tensor& x_t, std::span<const int> t,
                                            std::span<const Conditioning> c, FeatureTap tap) const {
  check_input(x_t, t);
  return run(x_t, t, label_indices(c, x_t.dim(0)), tap, false).features;
}

std::unique_ptr<DenoiserModel> DenoiserModel::clone() const {
  Rng scratch(0);
  auto copy = create(spec_, scratch);
  copy_parameters(*this, *copy);
  auto& dst = copy->params_.items();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    dst[i].second.set_requires_grad(params_.items()[i].second.requires_grad());
  }
  return copy;
}

bool DenoiserModel::frozen() const {
  for (const auto& [_, t] : params_.items()) {
    if (t.requires_grad()) return false;
  }
  return true;
}

void DenoiserModel::set_trainable(bool trainable) {
  for (auto& [_, t] : params_.items()) t.set_requires_grad(trainable);
}

void DenoiserModel::zero_grad() {
  for (auto& [_, t] : params_.items()) t.zero_grad();
}

std::unique_ptr<DenoiserModel> freeze_copy(const DenoiserModel& model) {
  for (const auto& [name, t] : model.parameters().items()) {
    for (float v : t.data()) {
      if (!std::isfinite(v)) throw NumericalError("freeze_copy: parameter '" + name + "' is not finite");
    }
  }
  auto copy = model.clone();
  copy->set_trainable(false);
  return copy;
}

void copy_parameters(const DenoiserModel& src, DenoiserModel& dst) {
  if (!(src.spec() == dst.spec())) throw ContractError("copy_parameters: model specs differ");
  const auto& s = src.parameters().items();
  auto& d = dst.parameters().items();
  for (std::size_t i = 0; i < s.size(); ++i) {
    auto out = d[i].second.data();
    std::copy(s[i].second.data().begin(), s[i].second.data().end(), out.begin());
  }
}

std::vector<Conditioning> repeat_conditioning(Conditioning c, std::size_t batch) {
  return std::vector<Conditioning>(batch, c);
}

}  // namespace splab
