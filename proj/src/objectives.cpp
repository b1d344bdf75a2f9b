#include "splab/objectives.hpp"

#include <cmath>
#include <sstream>

namespace splab {

std::string to_string(const TPrimeSampler& sampler) {
  if (const auto* d = std::get_if<DeltaStep>(&sampler)) return "delta:" + std::to_string(d->k);
  if (const auto* g = std::get_if<GaussianAroundT>(&sampler)) {
    std::ostringstream os;
    os << "gaussian:" << g->sigma;
    return os.str();
  }
  return "uniform";
}

std::string to_string(FeatureDistance d) { return d == FeatureDistance::Mse ? "mse" : "mae"; }

TPrimeSampler parse_tprime_sampler(const std::string& text) {
  if (text == "uniform") return UniformInt{};
  const auto colon = text.find(':');
  const std::string head = text.substr(0, colon);
  const bool has_arg = colon != std::string::npos;
  const std::string arg = has_arg ? text.substr(colon + 1) : "";
  auto number = [&](double fallback) {
    if (!has_arg) return fallback;
    std::size_t used = 0;
    const double v = std::stod(arg, &used);
    if (used != arg.size()) throw ConfigError("malformed tprime sampler '" + text + "'");
    return v;
  };
  try {
    if (head == "delta") {
      const double k = number(40.0);
      if (!(k >= 1.0) || k != std::floor(k)) throw ConfigError("tprime delta must be a positive integer");
      return DeltaStep{static_cast<int>(k)};
    }
    if (head == "gaussian") {
      const double sigma = number(100.0);
      if (!(sigma > 0.0)) throw ConfigError("tprime gaussian sigma must be positive");
      return GaussianAroundT{sigma};
    }
  } catch (const std::logic_error&) {
    throw ConfigError("malformed tprime sampler '" + text + "'");
  }
  throw ConfigError("unknown tprime sampler '" + text + "' (expected uniform, delta:<k>, gaussian:<sigma>)");
}

FeatureDistance parse_feature_distance(const std::string& text) {
  if (text == "mse") return FeatureDistance::Mse;
  if (text == "mae") return FeatureDistance::Mae;
  throw ConfigError("unknown feature distance '" + text + "'");
}

void SpConfig::validate() const {
  if (!(cond_dropout_prob >= 0.0 && cond_dropout_prob <= 1.0)) {
    throw ConfigError("cond_dropout_prob must lie in [0, 1]");
  }
}

// ---------------------------------------------------------------------------

DiffusionDraws draw_diffusion(const Tensor& x0, const NoiseSchedule& s, Rng& rng) {
  DiffusionDraws d;
  d.t.resize(x0.dim(0));
  for (auto& ti : d.t) ti = rng.uniform_int(1, s.timesteps());
  d.eps = Tensor::randn(x0.shape(), rng);
  return d;
}

namespace {

void require_finite(const Tensor& loss, const char* what, std::span<const int> t) {
  if (std::isfinite(loss.item())) return;
  std::ostringstream os;
  os << what << ": non-finite loss " << loss.item() << " on a batch of " << t.size() << " (t =";
  for (std::size_t i = 0; i < t.size() && i < 8; ++i) os << ' ' << t[i];
  os << (t.size() > 8 ? " ...)" : ")");
  throw NumericalError(os.str());
}

double mean_of(std::span<const int> v) {
  double acc = 0.0;
  for (int x : v) acc += x;
  return v.empty() ? 0.0 : acc / static_cast<double>(v.size());
}

}  // namespace

LossBatchResult mse_loss_at(const DenoiserModel& model, const Tensor& x0, std::span<const Conditioning> c,
                            const DiffusionDraws& draws, const NoiseSchedule& s) {
  const Tensor x_t = forward_diffuse(x0, draws.eps, draws.t, s);
  const Tensor target = v_target(x0, draws.eps, draws.t, s);
  const Tensor v_hat = model.forward(x_t, draws.t, c);
  LossBatchResult r;
  r.loss = mse_reduce(v_hat, target);
  require_finite(r.loss, "mse_loss", draws.t);
  r.aux["t_mean"] = mean_of(draws.t);
  return r;
}

LossBatchResult mse_loss(const DenoiserModel& model, const Tensor& x0, std::span<const Conditioning> c, Rng& rng,
                         const NoiseSchedule& s) {
  return mse_loss_at(model, x0, c, draw_diffusion(x0, s, rng), s);
}

// ---------------------------------------------------------------------------

int sample_tprime(int t, const SpConfig& cfg, int timesteps, Rng& rng) {
  if (t < 1 || t > timesteps) throw ContractError("sample_tprime: t outside [1, T]");
  if (timesteps < 2) throw ContractError("sample_tprime: need T >= 2");
  auto clamp = [timesteps](long v) { return static_cast<int>(std::clamp<long>(v, 1, timesteps)); };
  // Collision rule: a draw equal to t is moved one step toward the interior
  // (a fair coin decides when both neighbours are valid).
  auto resolve = [&](int candidate) {
    if (candidate != t) return candidate;
    if (t == timesteps) return t - 1;
    if (t == 1) return 2;
    return rng.bernoulli(0.5) ? t + 1 : t - 1;
  };
  return std::visit(
      [&](const auto& sampler) -> int {
        using S = std::decay_t<decltype(sampler)>;
        if constexpr (std::is_same_v<S, DeltaStep>) {
          const long step = rng.bernoulli(0.5) ? sampler.k : -sampler.k;
          return resolve(clamp(t + step));
        } else if constexpr (std::is_same_v<S, GaussianAroundT>) {
          return resolve(clamp(std::lround(rng.normal(static_cast<double>(t), sampler.sigma))));
        } else {
          int draw = rng.uniform_int(1, timesteps);
          if (draw == t) draw = rng.uniform_int(1, timesteps);
          return resolve(draw);
        }
      },
      cfg.tprime);
}

SpRenoised sp_renoise(const Tensor& x0, const Tensor& eps, const Tensor& v_hat, std::span<const int> t,
                      std::span<const int> tprime, const NoiseSchedule& s) {
  SpRenoised r;
  r.x_t = forward_diffuse(x0, eps, t, s);
  r.x0_hat = v_to_x0(v_hat, r.x_t, t, s);
  r.eps_hat = v_to_eps(v_hat, r.x_t, t, s);
  r.x_tprime = forward_diffuse(x0, eps, tprime, s);
  r.x_tprime_hat = forward_diffuse(r.x0_hat, r.eps_hat, tprime, s);
  return r;
}

Tensor feature_distance(std::span<const Tensor> predicted, std::span<const Tensor> target, FeatureDistance d) {
  if (predicted.empty() || predicted.size() != target.size()) {
    throw ContractError("feature_distance: tap lists must be non-empty and of equal length");
  }
  Tensor total;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    Tensor term = d == FeatureDistance::Mse ? mse_reduce(predicted[i], target[i]) : mae_reduce(predicted[i], target[i]);
    total = total.defined() ? add(total, term) : term;
  }
  return predicted.size() == 1 ? total : scale(total, 1.0f / static_cast<float>(predicted.size()));
}

Tensor sp_loss_from_prediction(const DenoiserModel& frozen, const Tensor& x0, const Tensor& eps, const Tensor& v_hat,
                               std::span<const int> t, std::span<const int> tprime, std::span<const Conditioning> c,
                               const NoiseSchedule& s, const SpConfig& cfg) {
  if (!frozen.frozen()) throw ContractError("sp_loss: perceptual network has trainable parameters");
  if (tprime.size() != t.size()) throw ContractError("sp_loss: need one t' per sample");
  const SpRenoised r = sp_renoise(x0, eps, v_hat, t, tprime, s);
  const auto real = frozen.features(r.x_tprime, tprime, c, cfg.tap);
  const auto pred = frozen.features(r.x_tprime_hat, tprime, c, cfg.tap);
  return feature_distance(pred, real, cfg.distance);
}

LossBatchResult sp_loss_at(const DenoiserModel& online, const DenoiserModel& frozen, const Tensor& x0,
                           std::span<const Conditioning> c, const DiffusionDraws& draws,
                           std::span<const int> tprime, const NoiseSchedule& s, const SpConfig& cfg) {
  if (!frozen.frozen()) throw ContractError("sp_loss: perceptual network has trainable parameters");
  if (tprime.size() != draws.t.size()) throw ContractError("sp_loss: need one t' per sample");
  const Tensor x_t = forward_diffuse(x0, draws.eps, draws.t, s);
  const Tensor v_hat = online.forward(x_t, draws.t, c);
  LossBatchResult out;
  out.loss = sp_loss_from_prediction(frozen, x0, draws.eps, v_hat, draws.t, tprime, c, s, cfg);
  require_finite(out.loss, "sp_loss", draws.t);
  out.aux["t_mean"] = mean_of(draws.t);
  out.aux["tprime_mean"] = mean_of(tprime);
  return out;
}

LossBatchResult sp_loss(const DenoiserModel& online, const DenoiserModel& frozen, const Tensor& x0,
                        std::span<const Conditioning> c, Rng& rng, const NoiseSchedule& s, const SpConfig& cfg) {
  const DiffusionDraws draws = draw_diffusion(x0, s, rng);
  std::vector<int> tprime(draws.t.size());
  for (std::size_t i = 0; i < tprime.size(); ++i) tprime[i] = sample_tprime(draws.t[i], cfg, s.timesteps(), rng);
  return sp_loss_at(online, frozen, x0, c, draws, tprime, s, cfg);
}

Conditioning apply_cond_dropout(Conditioning c, double p, Rng& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw ContractError("apply_cond_dropout: p must lie in [0, 1]");
  return rng.bernoulli(p) ? Conditioning::null() : c;
}

}  // namespace splab
