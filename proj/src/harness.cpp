#include "splab/harness.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

#ifndef SPLAB_CODE_VERSION
#define SPLAB_CODE_VERSION "unknown"
#endif

namespace splab {

namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point since) {
  return std::chrono::duration<double, std::milli>(Clock::now() - since).count();
}

std::string num(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

Tensor gather_rows(const Tensor& points, std::span<const std::size_t> idx) {
  const std::size_t per = points.per_sample();
  Shape shape = points.shape();
  shape[0] = idx.size();
  std::vector<float> out(idx.size() * per);
  const auto src = points.data();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy_n(src.begin() + static_cast<long>(idx[r] * per), per, out.begin() + static_cast<long>(r * per));
  }
  return Tensor(std::move(shape), std::move(out));
}

Tensor rows_of(const Tensor& t, std::size_t begin, std::size_t count) {
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), begin);
  return gather_rows(t, idx);
}

/// Keeps header lines and rows with step <= last_step.
void truncate_log(const fs::path& path, int last_step) {
  std::ifstream in(path);
  if (!in) return;
  std::vector<std::string> kept;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#' || line.rfind("step,", 0) == 0) {
      kept.push_back(line);
      continue;
    }
    int step = 0;
    std::from_chars(line.data(), line.data() + line.size(), step);
    if (step <= last_step) kept.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : kept) out << l << '\n';
}

int meta_int(const Checkpoint& ckpt, const std::string& key) {
  try {
    return std::stoi(ckpt.meta_value(key));
  } catch (const std::logic_error&) {
    throw ConfigError("checkpoint meta '" + key + "' is not an integer");
  }
}

}  // namespace

std::string code_version() { return SPLAB_CODE_VERSION; }

// ---------------------------------------------------------------------------
// Training

TrainingState TrainingState::start_from(const DenoiserModel& init) {
  TrainingState st;
  st.online = init.clone();
  st.online->set_trainable(true);
  st.ema = init.clone();
  st.ema->set_trainable(false);
  const auto params = st.online->parameters().tensors();
  st.adam = AdamState::for_params(params);
  return st;
}

Checkpoint TrainingState::to_checkpoint(std::map<std::string, std::string> meta) const {
  Checkpoint ckpt;
  ckpt.kind = online->kind();
  ckpt.meta = std::move(meta);
  put_model_spec(ckpt.meta, online->spec());
  ckpt.meta["step"] = std::to_string(step);
  ckpt.meta["adam_step"] = std::to_string(adam.step);
  append_parameters(ckpt, *online, "online/");
  append_parameters(ckpt, *ema, "ema/");
  const auto& items = online->parameters().items();
  for (std::size_t i = 0; i < items.size(); ++i) {
    const Shape& shape = items[i].second.shape();
    ckpt.tensors.emplace_back("adam_m/" + items[i].first, Tensor(shape, adam.m.at(i)));
    ckpt.tensors.emplace_back("adam_v/" + items[i].first, Tensor(shape, adam.v.at(i)));
  }
  return ckpt;
}

TrainingState TrainingState::from_checkpoint(const Checkpoint& ckpt) {
  TrainingState st;
  st.online = model_from_checkpoint(ckpt, "online/");
  st.ema = model_from_checkpoint(ckpt, "ema/");
  st.ema->set_trainable(false);
  st.step = meta_int(ckpt, "step");
  st.adam.step = meta_int(ckpt, "adam_step");
  for (const auto& [name, t] : st.online->parameters().items()) {
    const auto m = ckpt.tensor("adam_m/" + name).data();
    const auto v = ckpt.tensor("adam_v/" + name).data();
    if (m.size() != t.numel() || v.size() != t.numel()) throw ConfigError("checkpoint optimizer state size mismatch");
    st.adam.m.emplace_back(m.begin(), m.end());
    st.adam.v.emplace_back(v.begin(), v.end());
  }
  return st;
}

OracleReport oracle_check(const Experiment& exp, const DenoiserModel& model, int probes) {
  if (probes < 1) throw ConfigError("oracle check needs at least one probe");
  const auto& data = exp.data().train;
  const auto& s = exp.schedule();
  const bool mixture = exp.config().dataset == "gauss_mixture_8" && exp.config().image_dir.empty();
  const GaussianMixture mix = mixture ? gauss_mixture_8_spec(exp.config().dataset_params) : GaussianMixture{};
  std::vector<int> ts;
  for (int t = 1; t <= s.timesteps(); ++t) {
    if (s.alpha_bar(t) >= 0.05 && s.alpha_bar(t) <= 0.95) ts.push_back(t);
  }
  if (ts.empty()) throw ConfigError("schedule has no timesteps with alpha_bar in [0.05, 0.95]");

  OracleReport report;
  report.csv = exp.run_dir() / "oracle_check.csv";
  fs::create_directories(exp.run_dir());
  std::ofstream out(report.csv, std::ios::trunc);
  out << "# config_hash=" << exp.hash() << "\n" << "probe,t,alpha_bar,sq_err_empirical,sq_err_mixture\n";
  auto sq = [](const Tensor& a, const Tensor& b) {
    double acc = 0.0;
    for (std::size_t j = 0; j < a.numel(); ++j) acc += (double(a[j]) - double(b[j])) * (double(a[j]) - double(b[j]));
    return acc / static_cast<double>(a.numel());
  };
  Rng rng(exp.config().seed, {7});
  const Conditioning null = Conditioning::null();
  for (int p = 0; p < probes; ++p) {
    const int t = ts[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(ts.size()) - 1))];
    const std::size_t i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(data.size()) - 1));
    const Tensor x0 = gather_rows(data.points, std::span<const std::size_t>(&i, 1));
    const Tensor x_t = forward_diffuse(x0, Tensor::randn(x0.shape(), rng), t, s);
    const std::vector<int> tv{t};
    const Tensor v = model.forward(x_t, tv, std::span<const Conditioning>(&null, 1));
    const double e1 = sq(v, posterior_optimal_v(x_t, t, data, s));
    const double e2 = mixture ? sq(v, gaussian_mixture_v(x_t, t, mix, s)) : std::nan("");
    report.mse_empirical += e1;
    report.mse_mixture += e2;
    out << p << ',' << t << ',' << num(s.alpha_bar(t)) << ',' << num(e1) << ',' << num(e2) << '\n';
  }
  report.probes = static_cast<std::size_t>(probes);
  report.mse_empirical /= probes;
  report.mse_mixture /= probes;
  return report;
}

std::optional<int> checkpoint_step(const fs::path& path) {
  if (!fs::exists(path)) return std::nullopt;
  return meta_int(read_checkpoint(path), "step");
}

PhaseResult train_phase(TrainingState& state, const FiniteDataset& data, const DenoiserModel* frozen,
                        const NoiseSchedule& s, const PhaseOptions& opts) {
  if (opts.objective == Objective::SelfPerceptual && frozen == nullptr) {
    throw ContractError("train_phase: the self-perceptual objective needs a frozen network");
  }
  if (opts.batch < 1 || opts.log_every < 1 || opts.checkpoint_every < 0) {
    throw ContractError("train_phase: batch and log_every must be positive");
  }
  if (opts.conditional && data.labels.size() != data.size()) {
    throw ContractError("train_phase: conditional training needs one label per point");
  }
  data.validate();

  auto params = state.online->parameters().tensors();
  auto ema_params = state.ema->parameters().tensors();
  if (state.adam.m.size() != params.size()) state.adam = AdamState::for_params(params);
  AdamConfig adam_cfg;
  adam_cfg.lr = static_cast<float>(opts.lr);

  std::map<std::string, std::string> meta{{"config_hash", opts.config_hash},
                                          {"phase", std::to_string(opts.phase)},
                                          {"objective", opts.objective == Objective::Mse ? "mse" : "sp"},
                                          {"code_version", code_version()}};

  std::ofstream log;
  if (!opts.log_path.empty()) {
    if (state.step == 0) {
      log.open(opts.log_path, std::ios::trunc);
      log << "# config_hash=" << opts.config_hash << "\n";
      log << "step,loss,lr,wall_ms,t_mean,tprime_mean\n";
    } else {
      truncate_log(opts.log_path, state.step);
      log.open(opts.log_path, std::ios::app);
    }
    if (!log) throw ConfigError("cannot write training log " + opts.log_path.string());
  }

  auto save = [&] {
    if (!opts.checkpoint_path.empty()) write_checkpoint(opts.checkpoint_path, state.to_checkpoint(meta));
  };

  PhaseResult result;
  const auto start = Clock::now();
  const auto n = static_cast<int>(data.size());
  std::vector<std::size_t> idx(static_cast<std::size_t>(opts.batch));
  std::vector<Conditioning> cond(static_cast<std::size_t>(opts.batch));
  for (int k = state.step + 1; k <= opts.steps; ++k) {
    Rng rng(opts.seed, {static_cast<std::uint64_t>(opts.phase), static_cast<std::uint64_t>(k)});
    for (std::size_t i = 0; i < idx.size(); ++i) {
      idx[i] = static_cast<std::size_t>(rng.uniform_int(0, n - 1));
      cond[i] = opts.conditional ? apply_cond_dropout(Conditioning::of(data.labels[idx[i]]), opts.cond_dropout, rng)
                                 : Conditioning::null();
    }
    const Tensor x0 = gather_rows(data.points, idx);

    state.online->zero_grad();
    Tape tape;
    LossBatchResult r;
    {
      Tape::Scope scope(tape);
      r = opts.objective == Objective::Mse ? mse_loss(*state.online, x0, cond, rng, s)
                                           : sp_loss(*state.online, *frozen, x0, cond, rng, s, opts.sp);
    }
    const double loss = r.value();
    if (!std::isfinite(loss)) throw NumericalError("non-finite loss at step " + std::to_string(k));
    tape.backward(r.loss);
    adam_step(params, state.adam, adam_cfg);
    ema_update(ema_params, params, opts.ema_decay);
    state.step = k;
    result.losses.push_back(loss);

    if (log.is_open() && (k % opts.log_every == 0 || k == opts.steps)) {
      auto aux = [&](const char* key) {
        auto it = r.aux.find(key);
        return it == r.aux.end() ? std::string() : num(it->second);
      };
      log << k << ',' << num(loss) << ',' << num(opts.lr) << ',' << num(std::round(elapsed_ms(start))) << ','
          << aux("t_mean") << ',' << aux("tprime_mean") << '\n';
      log.flush();
    }
    if (opts.checkpoint_every > 0 && k % opts.checkpoint_every == 0 && k != opts.steps) save();
  }
  save();
  result.wall_ms = elapsed_ms(start);
  return result;
}

// ---------------------------------------------------------------------------
// Experiment setup

DatasetSplit load_datasets(const ExperimentConfig& cfg) {
  DatasetSplit split;
  if (cfg.image_dir.empty()) {
    Rng train_rng(cfg.seed, {1});
    split.train = generate_dataset(cfg.dataset, cfg.dataset_params, train_rng);
    DatasetParams held = cfg.dataset_params;
    held["n"] = cfg.heldout;
    Rng held_rng(cfg.seed, {2});
    split.heldout = generate_dataset(cfg.dataset, held, held_rng);
    return split;
  }
  FiniteDataset all = ingest_images(cfg.image_dir);
  const auto total = all.size();
  if (total <= static_cast<std::size_t>(cfg.heldout)) {
    throw ConfigError("image_dir holds " + std::to_string(total) + " images; need more than heldout = " +
                      std::to_string(cfg.heldout));
  }
  std::vector<std::size_t> order(total);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(cfg.seed, {1});
  std::shuffle(order.begin(), order.end(), rng.engine());
  auto take = [&](std::size_t begin, std::size_t count) {
    FiniteDataset d;
    std::span<const std::size_t> sel(order.data() + begin, count);
    d.points = gather_rows(all.points, sel);
    for (auto i : sel) d.labels.push_back(all.labels[i]);
    d.num_classes = all.num_classes;
    d.class_names = all.class_names;
    return d;
  };
  const auto held = static_cast<std::size_t>(cfg.heldout);
  split.train = take(0, total - held);
  split.heldout = take(total - held, held);
  return split;
}

ModelSpec resolve_model_spec(const ExperimentConfig& cfg, const FiniteDataset& data) {
  ModelSpec spec = cfg.model;
  spec.timesteps = cfg.timesteps;
  if (cfg.conditional) {
    if (data.num_classes < 1) throw ConfigError("conditional training needs a labelled dataset");
    spec.num_classes = data.num_classes;
  } else {
    spec.num_classes = 0;
  }
  const Shape& shape = data.points.shape();
  if (spec.kind == ModelKind::Mlp2d) {
    if (shape.size() != 2) throw ConfigError("mlp2d needs vector data; use model = tiny_unet for images");
    spec.data_dim = static_cast<int>(shape[1]);
  } else {
    if (shape.size() != 4 || shape[2] != shape[3]) {
      throw ConfigError("tiny_unet needs square [N, C, H, W] image data");
    }
    spec.in_channels = static_cast<int>(shape[1]);
    spec.image_size = static_cast<int>(shape[2]);
    if (spec.image_size % 4 != 0) throw ConfigError("tiny_unet needs an image size divisible by 4");
  }
  return spec;
}

NoiseSchedule make_schedule(const ExperimentConfig& cfg) {
  return NoiseSchedule::zero_terminal_snr(cfg.timesteps, cfg.beta_start, cfg.beta_end);
}

Experiment::Experiment(ExperimentConfig cfg)
    : cfg_(std::move(cfg)), hash_((cfg_.validate(), config_hash(cfg_))), schedule_(make_schedule(cfg_)),
      data_(load_datasets(cfg_)), spec_(resolve_model_spec(cfg_, data_.train)) {}

fs::path Experiment::run_dir() const { return cfg_.output_dir / hash_; }
fs::path Experiment::mse_dir() const { return cfg_.output_dir / ("mse-" + mse_phase_hash(cfg_)); }
fs::path Experiment::mse_checkpoint() const { return mse_dir() / "mse.ckpt"; }
fs::path Experiment::sp_checkpoint() const { return run_dir() / "sp.ckpt"; }

PhaseOptions Experiment::phase_options(Objective objective, int phase) const {
  PhaseOptions o;
  o.objective = objective;
  o.phase = phase;
  const bool mse = objective == Objective::Mse;
  o.steps = mse ? cfg_.mse.steps : cfg_.sp.steps;
  o.lr = mse ? cfg_.mse_lr() : cfg_.sp_lr();
  o.batch = mse ? cfg_.mse.batch : cfg_.sp.batch;
  o.ema_decay = cfg_.ema_decay;
  o.cond_dropout = cfg_.sp_objective.cond_dropout_prob;
  o.conditional = cfg_.conditional;
  o.sp = cfg_.sp_objective;
  o.checkpoint_every = cfg_.checkpoint_every;
  o.log_every = cfg_.log_every;
  o.seed = cfg_.seed;
  o.config_hash = mse ? mse_phase_hash(cfg_) : hash_;
  o.checkpoint_path = mse ? mse_checkpoint() : sp_checkpoint();
  o.log_path = mse ? mse_dir() / "mse_log.csv" : run_dir() / "sp_log.csv";
  return o;
}

PhaseResult Experiment::run_phase(TrainingState state, const DenoiserModel* frozen, const PhaseOptions& opts) {
  fs::create_directories(opts.checkpoint_path.parent_path());
  if (auto step = checkpoint_step(opts.checkpoint_path)) {
    const Checkpoint ckpt = read_checkpoint(opts.checkpoint_path);
    if (ckpt.meta_value("config_hash") != opts.config_hash) {
      throw ConfigError(opts.checkpoint_path.string() + " belongs to a different config");
    }
    if (*step >= opts.steps) return {};
    state = TrainingState::from_checkpoint(ckpt);
  }
  return train_phase(state, data_.train, frozen, schedule_, opts);
}

PhaseResult Experiment::ensure_mse() {
  Rng init_rng(cfg_.seed, {3});
  auto init = DenoiserModel::create(spec_, init_rng);
  return run_phase(TrainingState::start_from(*init), nullptr, phase_options(Objective::Mse, 1));
}

PhaseResult Experiment::ensure_sp() {
  const auto mse_step = checkpoint_step(mse_checkpoint());
  if (!mse_step || *mse_step < cfg_.mse.steps) {
    throw ConfigError("self-perceptual training needs a finished MSE checkpoint (" + mse_checkpoint().string() +
                      "); train the mse phase first");
  }
  std::unique_ptr<DenoiserModel> source;
  int phase = 2;
  if (cfg_.perceptual_source == "mse") {
    source = model_from_checkpoint(read_checkpoint(mse_checkpoint()), "ema/");
  } else {
    // Repeat: the SP model of the otherwise identical config becomes both the
    // starting point and the perceptual network.
    ExperimentConfig first = cfg_;
    first.perceptual_source = "mse";
    Experiment inner(first);
    inner.ensure_sp();
    source = model_from_checkpoint(read_checkpoint(inner.sp_checkpoint()), "ema/");
    phase = 3;
  }
  const auto frozen = freeze_copy(*source);
  return run_phase(TrainingState::start_from(*source), frozen.get(), phase_options(Objective::SelfPerceptual, phase));
}

void Experiment::seed_longer_mse(const Experiment& longer) const {
  ExperimentConfig expected = longer.cfg_;
  expected.mse.steps = cfg_.mse.steps;
  expected.output_dir = cfg_.output_dir;
  if (mse_phase_hash(expected) != mse_phase_hash(cfg_) || longer.cfg_.mse.steps < cfg_.mse.steps) {
    throw ConfigError("seed_longer_mse: configs differ in more than the MSE step count");
  }
  if (fs::exists(longer.mse_checkpoint())) return;
  const auto step = checkpoint_step(mse_checkpoint());
  if (!step || *step < cfg_.mse.steps) throw ConfigError("seed_longer_mse: the MSE phase is not finished");
  Checkpoint ckpt = read_checkpoint(mse_checkpoint());
  const std::string hash = mse_phase_hash(longer.cfg_);
  ckpt.meta["config_hash"] = hash;
  fs::create_directories(longer.mse_dir());
  std::ifstream in(mse_dir() / "mse_log.csv");
  std::ofstream out(longer.mse_dir() / "mse_log.csv", std::ios::trunc);
  std::string line;
  while (std::getline(in, line)) {
    out << (line.rfind("# config_hash=", 0) == 0 ? "# config_hash=" + hash : line) << '\n';
  }
  write_checkpoint(longer.mse_checkpoint(), ckpt);
}

std::unique_ptr<DenoiserModel> Experiment::load_model(const std::string& which) const {
  fs::path path;
  if (which == "mse") {
    path = mse_checkpoint();
  } else if (which == "sp") {
    path = sp_checkpoint();
  } else {
    throw ConfigError("unknown model '" + which + "' (expected mse or sp)");
  }
  if (!fs::exists(path)) throw ConfigError("no " + which + " checkpoint at " + path.string() + "; train first");
  auto model = model_from_checkpoint(read_checkpoint(path), cfg_.eval_ema ? "ema/" : "online/");
  model->set_trainable(false);
  return model;
}

EvalResult Experiment::evaluate(const DenoiserModel& model, const SamplerConfig& sampler) const {
  const auto n = static_cast<std::size_t>(cfg_.eval_samples);
  Shape shape = model.sample_shape();
  shape.insert(shape.begin(), n);
  Rng noise_rng(cfg_.seed, {4});
  const Tensor x_T = Tensor::randn(shape, noise_rng);

  EvalResult out;
  out.conditioning.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.conditioning[i] = cfg_.conditional ? Conditioning::of(data_.heldout.labels[i % data_.heldout.size()])
                                           : Conditioning::null();
  }
  std::vector<float> samples;
  samples.reserve(x_T.numel());
  constexpr std::size_t kChunk = 512;
  for (std::size_t begin = 0; begin < n; begin += kChunk) {
    const std::size_t count = std::min(kChunk, n - begin);
    const std::span<const Conditioning> c(out.conditioning.data() + begin, count);
    const SampleTrajectory traj = sample_from(model, rows_of(x_T, begin, count), c, sampler, schedule_);
    out.nfe_per_sample = traj.nfe;
    const auto d = traj.sample.data();
    samples.insert(samples.end(), d.begin(), d.end());
  }
  out.samples = Tensor(shape, std::move(samples));
  for (float v : out.samples.data()) {
    if (!std::isfinite(v)) throw NumericalError("sampling produced non-finite values");
  }
  out.metrics = compute_metrics(data_.heldout.points, out.samples);
  return out;
}

std::vector<MetricRow> Experiment::evaluate_all() {
  std::vector<MetricRow> rows;
  const std::vector<std::pair<std::string, fs::path>> phases{{"mse", mse_checkpoint()}, {"sp", sp_checkpoint()}};
  for (const auto& [name, path] : phases) {
    if (!fs::exists(path)) continue;
    const auto model = load_model(name);
    MetricRow row;
    row.run_id = hash_ + "/" + name;
    row.config_hash = hash_;
    row.model = name;
    row.weights = cfg_.eval_ema ? "ema" : "online";
    row.sampler = cfg_.sampler;
    row.result = evaluate(*model, cfg_.sampler);
    rows.push_back(std::move(row));
  }
  fs::create_directories(run_dir());
  write_metric_rows(run_dir() / "metrics.csv", rows);
  outputs_.push_back(run_dir() / "metrics.csv");
  return rows;
}

void write_metric_rows(const fs::path& path, const std::vector<MetricRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << "run_id,config_hash,model,weights,steps,cfg_scale,rescale_phi,nfe,energy_distance,mmd_rbf,nn_recall\n";
  for (const auto& r : rows) {
    out << r.run_id << ',' << r.config_hash << ',' << r.model << ',' << r.weights << ',' << r.sampler.steps << ','
        << num(r.sampler.cfg_scale) << ',' << num(r.sampler.rescale_phi) << ',' << r.result.nfe_per_sample << ','
        << num(r.result.metrics.energy_distance) << ',' << num(r.result.metrics.mmd_rbf) << ','
        << num(r.result.metrics.nearest_neighbor_recall) << '\n';
  }
}

std::optional<PlateauReport> plateau_report(const fs::path& log) {
  std::ifstream in(log);
  if (!in) return std::nullopt;
  std::vector<double> losses;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#' || line.rfind("step,", 0) == 0) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) continue;
    const auto end = line.find(',', comma + 1);
    double v = 0.0;
    std::from_chars(line.data() + comma + 1, line.data() + (end == std::string::npos ? line.size() : end), v);
    losses.push_back(v);
  }
  if (losses.size() < 10) return std::nullopt;
  const std::size_t window = losses.size() / 5;
  const auto last = losses.end() - static_cast<std::ptrdiff_t>(window);
  const auto before = last - static_cast<std::ptrdiff_t>(window);
  PlateauReport r;
  r.logged = losses.size();
  r.earlier_mean = std::accumulate(before, last, 0.0) / double(window);
  r.final_mean = std::accumulate(last, losses.end(), 0.0) / double(window);
  r.relative_change = (r.final_mean - r.earlier_mean) / std::abs(r.earlier_mean);
  r.plateaued = std::abs(r.relative_change) < 0.05;
  return r;
}

void Experiment::write_manifest(double wall_ms) const {
  fs::create_directories(run_dir());
  {
    std::ofstream out(run_dir() / "config.txt", std::ios::trunc);
    out << "# config_hash=" << hash_ << "\n" << canonical_config(cfg_);
  }
  nlohmann::ordered_json m;
  m["config_hash"] = hash_;
  m["mse_phase_hash"] = mse_phase_hash(cfg_);
  m["code_version"] = code_version();
  m["seed"] = cfg_.seed;
  nlohmann::ordered_json ckpts;
  if (auto step = checkpoint_step(mse_checkpoint())) ckpts["mse"] = {{"path", mse_checkpoint().string()}, {"step", *step}};
  if (auto step = checkpoint_step(sp_checkpoint())) ckpts["sp"] = {{"path", sp_checkpoint().string()}, {"step", *step}};
  m["checkpoints"] = ckpts;
  nlohmann::ordered_json plateau = nlohmann::ordered_json::object();
  for (const auto& [phase, log] : {std::pair{"mse", mse_dir() / "mse_log.csv"}, {"sp", run_dir() / "sp_log.csv"}}) {
    if (auto r = plateau_report(log)) {
      plateau[phase] = {{"logged", r->logged},
                        {"earlier_mean", r->earlier_mean},
                        {"final_mean", r->final_mean},
                        {"relative_change", r->relative_change},
                        {"plateaued", r->plateaued}};
    }
  }
  m["plateau"] = plateau;
  std::vector<std::string> outs;
  for (const auto& p : outputs_) outs.push_back(p.string());
  std::sort(outs.begin(), outs.end());
  outs.erase(std::unique(outs.begin(), outs.end()), outs.end());
  m["outputs"] = outs;
  std::ofstream(run_dir() / "manifest.json", std::ios::trunc) << m.dump(2) << "\n";
  nlohmann::ordered_json timing{{"config_hash", hash_}, {"wall_ms", wall_ms}};
  std::ofstream(run_dir() / "timing.json", std::ios::trunc) << timing.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Ablations

std::vector<std::string> ablation_axes() {
  return {"tap", "tprime_sampler", "feature_distance", "perceptual_source", "cfg_scale"};
}

std::vector<std::string> default_ablation_values(const std::string& axis) {
  if (axis == "tap") return {"encoder_all", "decoder_all", "encoder_plus_mid", "mid_only"};
  if (axis == "tprime_sampler") return {"delta:40", "gaussian:100", "uniform"};
  if (axis == "feature_distance") return {"mae", "mse"};
  if (axis == "perceptual_source") return {"mse", "sp"};
  if (axis == "cfg_scale") return {"1", "2", "3", "4", "7.5"};
  throw ConfigError("unknown ablation axis '" + axis + "'");
}

namespace {

std::string ablation_key(const std::string& axis) {
  if (axis == "tap") return "sp.tap";
  if (axis == "tprime_sampler") return "sp.tprime";
  if (axis == "feature_distance") return "sp.distance";
  if (axis == "perceptual_source") return "sp.perceptual_source";
  throw ConfigError("unknown ablation axis '" + axis + "'");
}

std::string ablation_label(const std::string& axis, const std::string& value) {
  static const std::map<std::string, std::string> labels{
      {"tap/encoder_all", "All Encoder Layers"},
      {"tap/decoder_all", "All Decoder Layers"},
      {"tap/encoder_plus_mid", "All Encoder Layers + Midblock Layer"},
      {"tap/mid_only", "Only Midblock Layer"},
      {"feature_distance/mae", "Mean Absolute Distance"},
      {"feature_distance/mse", "Mean Squared Distance"},
      {"perceptual_source/mse", "MSE model as perceptual network"},
      {"perceptual_source/sp", "SP model as perceptual network"},
  };
  if (auto it = labels.find(axis + "/" + value); it != labels.end()) return it->second;
  if (axis == "tprime_sampler") {
    const auto sampler = parse_tprime_sampler(value);
    if (const auto* d = std::get_if<DeltaStep>(&sampler)) return "t'=t+-" + std::to_string(d->k);
    if (const auto* g = std::get_if<GaussianAroundT>(&sampler)) return "t'~N(t," + num(g->sigma) + ")";
    return "t'~U(1,T)";
  }
  return axis + "=" + value;
}

double parse_scale(const std::string& text) {
  double v = 0.0;
  auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw ConfigError("cfg_scale: expected a number, got '" + text + "'");
  }
  return v;
}

MetricRow metric_row(const Experiment& e, const std::string& model_name, const SamplerConfig& sampler) {
  const auto model = e.load_model(model_name);
  MetricRow row;
  row.run_id = e.hash() + "/" + model_name;
  row.config_hash = e.hash();
  row.model = model_name;
  row.weights = e.config().eval_ema ? "ema" : "online";
  row.sampler = sampler;
  row.result = e.evaluate(*model, sampler);
  return row;
}

}  // namespace

std::vector<AblationRow> run_ablation(const std::string& axis, const std::vector<std::string>& values,
                                      const ExperimentConfig& base) {
  std::vector<AblationRow> rows;
  if (axis == "cfg_scale") {
    Experiment e(base);
    e.ensure_mse();
    e.ensure_sp();
    SamplerConfig reference = base.sampler;
    reference.cfg_scale = 7.5;
    reference.rescale_phi = 0.7;
    rows.push_back({axis, "7.5", "MSE cfg=7.5 rescale=0.7", metric_row(e, "mse", reference)});
    for (const auto& v : values) {
      SamplerConfig sc = base.sampler;
      sc.cfg_scale = parse_scale(v);
      sc.rescale_phi = sc.cfg_scale > 1.0 ? 0.7 : 0.0;
      sc.validate(base.timesteps);
      const std::string label = sc.cfg_scale == 1.0 ? "SP" : "SP cfg=" + v + " rescale=0.7";
      rows.push_back({axis, v, label, metric_row(e, "sp", sc)});
    }
    return rows;
  }
  const std::string key = ablation_key(axis);
  for (const auto& v : values) {
    ExperimentConfig cfg = base;
    set_config_value(cfg, key, v);
    Experiment e(cfg);
    e.ensure_mse();
    e.ensure_sp();
    MetricRow row = metric_row(e, "sp", cfg.sampler);
    write_metric_rows(e.run_dir() / "metrics.csv", {row});
    rows.push_back({axis, v, ablation_label(axis, v), std::move(row)});
  }
  return rows;
}

void write_ablation_csv(const fs::path& path, const std::vector<AblationRow>& rows, const std::string& base_hash) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << "# config_hash=" << base_hash << "\n";
  out << "axis,value,label,run_id,config_hash,model,cfg_scale,rescale_phi,nfe,energy_distance,mmd_rbf,nn_recall\n";
  for (const auto& a : rows) {
    const auto& r = a.row;
    out << a.axis << ',' << a.value << ",\"" << a.label << "\"," << r.run_id << ',' << r.config_hash << ','
        << r.model << ',' << num(r.sampler.cfg_scale) << ',' << num(r.sampler.rescale_phi) << ','
        << r.result.nfe_per_sample << ',' << num(r.result.metrics.energy_distance) << ','
        << num(r.result.metrics.mmd_rbf) << ',' << num(r.result.metrics.nearest_neighbor_recall) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Figures

void write_tensor_csv(const fs::path& path, const Tensor& rows, const std::vector<int>& labels,
                      const std::string& config_hash) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  const std::size_t n = rows.dim(0), per = rows.per_sample();
  out << "# config_hash=" << config_hash << "\n";
  if (!labels.empty()) out << "label,";
  for (std::size_t j = 0; j < per; ++j) out << (j ? "," : "") << 'v' << j;
  out << '\n';
  const auto d = rows.data();
  for (std::size_t i = 0; i < n; ++i) {
    if (!labels.empty()) out << labels.at(i) << ',';
    for (std::size_t j = 0; j < per; ++j) out << (j ? "," : "") << num(d[i * per + j]);
    out << '\n';
  }
}

Tensor read_tensor_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::string line;
  bool header_seen = false;
  bool skip_first = false;
  std::size_t cols = 0;
  std::vector<float> values;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!header_seen) {
      header_seen = true;
      skip_first = !cells.empty() && cells[0] == "label";
      cols = cells.size() - (skip_first ? 1 : 0);
      continue;
    }
    if (cells.size() - (skip_first ? 1 : 0) != cols) {
      throw ConfigError(path.string() + ": row " + std::to_string(rows + 1) + " has the wrong number of columns");
    }
    for (std::size_t j = skip_first ? 1 : 0; j < cells.size(); ++j) {
      float v = 0.0f;
      auto res = std::from_chars(cells[j].data(), cells[j].data() + cells[j].size(), v);
      if (res.ec != std::errc()) throw ConfigError(path.string() + ": non-numeric cell '" + cells[j] + "'");
      values.push_back(v);
    }
    ++rows;
  }
  if (rows == 0 || cols == 0) throw ConfigError(path.string() + ": no data rows");
  return Tensor({rows, cols}, std::move(values));
}

namespace {

/// Rows of images laid out left to right, top to bottom with a one-pixel gap.
void write_image_grid(const fs::path& path, const std::vector<std::vector<float>>& images, int size, int cols,
                      const std::string& config_hash) {
  const int count = static_cast<int>(images.size());
  const int rows = (count + cols - 1) / cols;
  const int w = cols * (size + 1) + 1, h = rows * (size + 1) + 1;
  std::vector<float> canvas(static_cast<std::size_t>(w * h), -1.0f);
  for (int i = 0; i < count; ++i) {
    const int ox = 1 + (i % cols) * (size + 1), oy = 1 + (i / cols) * (size + 1);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        canvas[static_cast<std::size_t>((oy + y) * w + ox + x)] = images[static_cast<std::size_t>(i)][static_cast<std::size_t>(y * size + x)];
  }
  write_pgm(path, canvas, w, h, {"config_hash=" + config_hash});
}

std::vector<float> row_vector(const Tensor& t, std::size_t i) {
  const std::size_t per = t.per_sample();
  const auto d = t.data().subspan(i * per, per);
  return {d.begin(), d.end()};
}

/// 2-D scatter raster over [-extent, extent]^2: data gray, samples white.
void write_scatter(const fs::path& path, const Tensor& data, const Tensor& samples, const std::string& config_hash) {
  constexpr int kSize = 160;
  constexpr double kExtent = 2.5;
  std::vector<float> canvas(kSize * kSize, -1.0f);
  auto plot = [&](const Tensor& pts, float value) {
    const auto d = pts.data();
    for (std::size_t i = 0; i < pts.dim(0); ++i) {
      const int x = static_cast<int>(std::floor((d[2 * i] + kExtent) / (2 * kExtent) * kSize));
      const int y = static_cast<int>(std::floor((kExtent - d[2 * i + 1]) / (2 * kExtent) * kSize));
      if (x >= 0 && x < kSize && y >= 0 && y < kSize) canvas[static_cast<std::size_t>(y * kSize + x)] = value;
    }
  };
  plot(data, 0.0f);
  plot(samples, 1.0f);
  write_pgm(path, canvas, kSize, kSize, {"config_hash=" + config_hash, "gray: held-out data, white: samples"});
}

}  // namespace

std::vector<fs::path> emit_figures(Experiment& exp) {
  const auto& cfg = exp.config();
  const fs::path dir = exp.run_dir() / "figures";
  fs::create_directories(dir);
  std::vector<fs::path> written;
  const bool images = exp.model_spec().kind == ModelKind::TinyUnet;
  const int size = exp.model_spec().image_size;
  const auto& held = exp.data().heldout;

  if (images) {
    std::vector<std::vector<float>> grid;
    for (std::size_t i = 0; i < std::min<std::size_t>(64, held.size()); ++i) grid.push_back(row_vector(held.points, i));
    write_image_grid(dir / "data_grid.pgm", grid, size, 8, exp.hash());
    written.push_back(dir / "data_grid.pgm");
  } else {
    write_tensor_csv(dir / "data_heldout.csv", held.points, held.labels, exp.hash());
    written.push_back(dir / "data_heldout.csv");
  }

  struct Variant {
    std::string name;
    std::string model;
    SamplerConfig sampler;
  };
  std::vector<Variant> variants{{"mse", "mse", cfg.sampler}};
  if (cfg.conditional) {
    SamplerConfig guided = cfg.sampler;
    guided.cfg_scale = 7.5;
    guided.rescale_phi = 0.7;
    variants.push_back({"mse_cfg", "mse", guided});
  }
  variants.push_back({"sp", "sp", cfg.sampler});

  // Column times of the x0-prediction strip: T, 0.9 T, ..., 0.1 T, then the final sample.
  std::vector<int> strip_times;
  for (int i = 10; i >= 1; --i) strip_times.push_back(static_cast<int>(std::lround(cfg.timesteps * i / 10.0)));

  for (const auto& v : variants) {
    const fs::path ckpt = v.model == "mse" ? exp.mse_checkpoint() : exp.sp_checkpoint();
    if (!fs::exists(ckpt)) continue;
    const auto model = exp.load_model(v.model);

    if (!images) {
      const EvalResult r = exp.evaluate(*model, v.sampler);
      std::vector<int> labels;
      for (const auto& c : r.conditioning) labels.push_back(c.class_id);
      write_tensor_csv(dir / ("samples_" + v.name + ".csv"), r.samples, labels, exp.hash());
      write_scatter(dir / ("scatter_" + v.name + ".pgm"), held.points, r.samples, exp.hash());
      written.push_back(dir / ("samples_" + v.name + ".csv"));
      written.push_back(dir / ("scatter_" + v.name + ".pgm"));
    }

    // A small batch with recorded trajectory: the grid (images) and the strip.
    const std::size_t n = images ? 64 : 8;
    std::vector<Conditioning> c(n, Conditioning::null());
    if (cfg.conditional) {
      for (std::size_t i = 0; i < n; ++i) c[i] = Conditioning::of(static_cast<int>(i) % exp.model_spec().num_classes);
    }
    Rng rng(cfg.seed, {5});
    SamplerConfig sc = v.sampler;
    sc.record_trajectory = true;
    const SampleTrajectory traj = sample(*model, c, sc, exp.schedule(), rng);

    std::vector<const TrajectoryStep*> picks;
    for (int t : strip_times) {
      const TrajectoryStep* best = &traj.steps.front();
      for (const auto& st : traj.steps) {
        if (std::abs(st.t - t) < std::abs(best->t - t)) best = &st;
      }
      picks.push_back(best);
    }

    {
      std::ofstream out(dir / ("trajectory_" + v.name + ".csv"), std::ios::trunc);
      out << "# config_hash=" << exp.hash() << "\n";
      out << "sample,t,label";
      const std::size_t per = traj.sample.per_sample();
      for (std::size_t j = 0; j < per; ++j) out << ",v" << j;
      out << "\n";
      const std::size_t rows = images ? 4 : n;
      for (std::size_t i = 0; i < rows; ++i) {
        auto emit = [&](const std::string& t, const Tensor& x) {
          out << i << ',' << t << ',' << c[i].class_id;
          for (float val : row_vector(x, i)) out << ',' << num(val);
          out << '\n';
        };
        for (const auto* st : picks) emit(std::to_string(st->t), st->x0_hat);
        emit("final", traj.sample);
      }
      written.push_back(dir / ("trajectory_" + v.name + ".csv"));
    }

    if (images) {
      std::vector<std::vector<float>> grid;
      for (std::size_t i = 0; i < n; ++i) grid.push_back(row_vector(traj.sample, i));
      write_image_grid(dir / ("grid_" + v.name + ".pgm"), grid, size, 8, exp.hash());
      std::vector<std::vector<float>> strip;
      for (std::size_t i = 0; i < 4; ++i) {
        for (const auto* st : picks) strip.push_back(row_vector(st->x0_hat, i));
        strip.push_back(row_vector(traj.sample, i));
      }
      write_image_grid(dir / ("strip_" + v.name + ".pgm"), strip, size, static_cast<int>(picks.size()) + 1,
                       exp.hash());
      written.push_back(dir / ("grid_" + v.name + ".pgm"));
      written.push_back(dir / ("strip_" + v.name + ".pgm"));
    }
  }
  return written;
}

Tensor emit_midpoint_figure(const fs::path& dir, const Tensor& a, const Tensor& b, const std::string& config_hash) {
  fs::create_directories(dir);
  const std::vector<Tensor> pair{a, b};
  const Tensor mid = mse_midpoint(pair);
  const Shape& shape = a.shape();
  std::vector<float> rows;
  for (const Tensor* t : {&a, &mid, &b}) rows.insert(rows.end(), t->data().begin(), t->data().end());
  write_tensor_csv(dir / "midpoint.csv", Tensor({3, a.numel()}, rows), {}, config_hash);
  if (shape.size() >= 2) {
    const int h = static_cast<int>(shape[shape.size() - 2]), w = static_cast<int>(shape[shape.size() - 1]);
    if (h == w && static_cast<std::size_t>(h * w) == a.numel()) {
      write_image_grid(dir / "midpoint.pgm", {row_vector(a.reshape({1, a.numel()}), 0),
                                              row_vector(mid.reshape({1, a.numel()}), 0),
                                              row_vector(b.reshape({1, a.numel()}), 0)},
                       h, 3, config_hash);
    }
  }
  return mid;
}

}  // namespace splab
