#include "splab/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace splab {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string fmt(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& key, const std::string& text) {
  double v = 0.0;
  const char* end = text.data() + text.size();
  auto res = std::from_chars(text.data(), end, v);
  if (res.ec != std::errc() || res.ptr != end) throw ConfigError(key + ": expected a number, got '" + text + "'");
  return v;
}

long long parse_integer(const std::string& key, const std::string& text) {
  long long v = 0;
  const char* end = text.data() + text.size();
  auto res = std::from_chars(text.data(), end, v);
  if (res.ec != std::errc() || res.ptr != end) throw ConfigError(key + ": expected an integer, got '" + text + "'");
  return v;
}

int parse_int(const std::string& key, const std::string& text) {
  const long long v = parse_integer(key, text);
  if (v < -2147483647LL || v > 2147483647LL) throw ConfigError(key + ": value out of range");
  return static_cast<int>(v);
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ConfigError(key + ": expected true/false, got '" + text + "'");
}

std::string bool_str(bool b) { return b ? "true" : "false"; }

template <typename F>
auto translate(const std::string& key, F parse) {
  try {
    return parse();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

struct Field {
  std::function<void(ExperimentConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
  bool phase1 = false;  // influences MSE training
};

const std::vector<std::pair<std::string, Field>>& fields() {
  using C = ExperimentConfig;
  using S = const std::string&;
  static const std::vector<std::pair<std::string, Field>> table = {
      {"dataset", {[](C& c, S, S v) { c.dataset = v; }, [](const C& c) { return c.dataset; }, true}},
      {"image_dir", {[](C& c, S, S v) { c.image_dir = v; }, [](const C& c) { return c.image_dir; }, true}},
      {"heldout", {[](C& c, S k, S v) { c.heldout = parse_int(k, v); },
                   [](const C& c) { return std::to_string(c.heldout); }, true}},
      {"conditional", {[](C& c, S k, S v) { c.conditional = parse_bool(k, v); },
                       [](const C& c) { return bool_str(c.conditional); }, true}},
      {"model", {[](C& c, S k, S v) { c.model.kind = translate(k, [&] { return parse_model_kind(v); }); },
                 [](const C& c) { return to_string(c.model.kind); }, true}},
      {"model.hidden", {[](C& c, S k, S v) { c.model.hidden = parse_int(k, v); },
                        [](const C& c) { return std::to_string(c.model.hidden); }, true}},
      {"model.time_embed_dim", {[](C& c, S k, S v) { c.model.time_embed_dim = parse_int(k, v); },
                                [](const C& c) { return std::to_string(c.model.time_embed_dim); }, true}},
      {"model.class_embed_dim", {[](C& c, S k, S v) { c.model.class_embed_dim = parse_int(k, v); },
                                 [](const C& c) { return std::to_string(c.model.class_embed_dim); }, true}},
      {"model.channels",
       {[](C& c, S k, S v) {
          std::stringstream ss(v);
          std::string part;
          std::vector<int> ch;
          while (std::getline(ss, part, ',')) ch.push_back(parse_int(k, trim(part)));
          if (ch.size() != 3) throw ConfigError(k + ": expected three comma-separated widths");
          c.model.channels = {ch[0], ch[1], ch[2]};
        },
        [](const C& c) {
          return std::to_string(c.model.channels[0]) + "," + std::to_string(c.model.channels[1]) + "," +
                 std::to_string(c.model.channels[2]);
        },
        true}},
      {"model.groups", {[](C& c, S k, S v) { c.model.groups = parse_int(k, v); },
                        [](const C& c) { return std::to_string(c.model.groups); }, true}},
      {"model.cond_dim", {[](C& c, S k, S v) { c.model.cond_dim = parse_int(k, v); },
                          [](const C& c) { return std::to_string(c.model.cond_dim); }, true}},
      {"schedule.timesteps", {[](C& c, S k, S v) { c.timesteps = parse_int(k, v); },
                              [](const C& c) { return std::to_string(c.timesteps); }, true}},
      {"schedule.beta_start", {[](C& c, S k, S v) { c.beta_start = parse_double(k, v); },
                               [](const C& c) { return fmt(c.beta_start); }, true}},
      {"schedule.beta_end", {[](C& c, S k, S v) { c.beta_end = parse_double(k, v); },
                             [](const C& c) { return fmt(c.beta_end); }, true}},
      {"mse.steps", {[](C& c, S k, S v) { c.mse.steps = parse_int(k, v); },
                     [](const C& c) { return std::to_string(c.mse.steps); }, true}},
      {"mse.lr", {[](C& c, S k, S v) { c.mse.lr = parse_double(k, v); }, [](const C& c) { return fmt(c.mse_lr()); },
                  true}},
      {"mse.batch", {[](C& c, S k, S v) { c.mse.batch = parse_int(k, v); },
                     [](const C& c) { return std::to_string(c.mse.batch); }, true}},
      {"cond_dropout", {[](C& c, S k, S v) { c.sp_objective.cond_dropout_prob = parse_double(k, v); },
                        [](const C& c) { return fmt(c.sp_objective.cond_dropout_prob); }, true}},
      {"ema_decay", {[](C& c, S k, S v) { c.ema_decay = parse_double(k, v); },
                     [](const C& c) { return fmt(c.ema_decay); }, true}},
      {"checkpoint_every", {[](C& c, S k, S v) { c.checkpoint_every = parse_int(k, v); },
                            [](const C& c) { return std::to_string(c.checkpoint_every); }, true}},
      {"log_every", {[](C& c, S k, S v) { c.log_every = parse_int(k, v); },
                     [](const C& c) { return std::to_string(c.log_every); }, true}},
      {"seed", {[](C& c, S k, S v) {
                  const long long s = parse_integer(k, v);
                  if (s < 0) throw ConfigError(k + ": must be non-negative");
                  c.seed = static_cast<std::uint64_t>(s);
                },
                [](const C& c) { return std::to_string(c.seed); }, true}},
      {"sp.steps", {[](C& c, S k, S v) { c.sp.steps = parse_int(k, v); },
                    [](const C& c) { return std::to_string(c.sp.steps); }}},
      {"sp.lr", {[](C& c, S k, S v) { c.sp.lr = parse_double(k, v); }, [](const C& c) { return fmt(c.sp_lr()); }}},
      {"sp.batch", {[](C& c, S k, S v) { c.sp.batch = parse_int(k, v); },
                    [](const C& c) { return std::to_string(c.sp.batch); }}},
      {"sp.tap", {[](C& c, S k, S v) { c.sp_objective.tap = translate(k, [&] { return parse_feature_tap(v); }); },
                  [](const C& c) { return to_string(c.sp_objective.tap); }}},
      {"sp.tprime",
       {[](C& c, S k, S v) { c.sp_objective.tprime = translate(k, [&] { return parse_tprime_sampler(v); }); },
        [](const C& c) { return to_string(c.sp_objective.tprime); }}},
      {"sp.distance",
       {[](C& c, S k, S v) { c.sp_objective.distance = translate(k, [&] { return parse_feature_distance(v); }); },
        [](const C& c) { return to_string(c.sp_objective.distance); }}},
      {"sp.perceptual_source",
       {[](C& c, S k, S v) {
          if (v != "mse" && v != "sp") throw ConfigError(k + ": expected 'mse' or 'sp'");
          c.perceptual_source = v;
        },
        [](const C& c) { return c.perceptual_source; }}},
      {"sampler.steps", {[](C& c, S k, S v) { c.sampler.steps = parse_int(k, v); },
                         [](const C& c) { return std::to_string(c.sampler.steps); }}},
      {"sampler.cfg_scale", {[](C& c, S k, S v) { c.sampler.cfg_scale = parse_double(k, v); },
                             [](const C& c) { return fmt(c.sampler.cfg_scale); }}},
      {"sampler.rescale_phi", {[](C& c, S k, S v) { c.sampler.rescale_phi = parse_double(k, v); },
                               [](const C& c) { return fmt(c.sampler.rescale_phi); }}},
      {"eval.samples", {[](C& c, S k, S v) { c.eval_samples = parse_int(k, v); },
                        [](const C& c) { return std::to_string(c.eval_samples); }}},
      {"eval.weights",
       {[](C& c, S k, S v) {
          if (v != "ema" && v != "online") throw ConfigError(k + ": expected 'ema' or 'online'");
          c.eval_ema = v == "ema";
        },
        [](const C& c) { return std::string(c.eval_ema ? "ema" : "online"); }}},
  };
  return table;
}

const Field* find_field(const std::string& key) {
  for (const auto& [k, f] : fields()) {
    if (k == key) return &f;
  }
  return nullptr;
}

std::string canonical_lines(const ExperimentConfig& cfg, bool phase1_only) {
  std::map<std::string, std::string> lines;
  for (const auto& [k, f] : fields()) {
    if (!phase1_only || f.phase1) lines[k] = f.get(cfg);
  }
  for (const auto& [k, v] : cfg.dataset_params) lines["dataset." + k] = fmt(v);
  std::string out;
  for (const auto& [k, v] : lines) out += k + "=" + v + "\n";
  return out;
}

}  // namespace

double ExperimentConfig::mse_lr() const {
  if (mse.lr > 0.0) return mse.lr;
  return model.kind == ModelKind::Mlp2d ? 3e-4 : 1e-4;
}

double ExperimentConfig::sp_lr() const {
  if (sp.lr > 0.0) return sp.lr;
  return model.kind == ModelKind::Mlp2d ? 3e-4 : 1e-4;
}

void ExperimentConfig::validate() const {
  if (image_dir.empty()) {
    const auto names = builtin_dataset_names();
    if (std::find(names.begin(), names.end(), dataset) == names.end()) {
      throw ConfigError("unknown dataset '" + dataset + "'");
    }
  } else if (!std::filesystem::is_directory(image_dir)) {
    throw ConfigError("image_dir does not exist: " + image_dir);
  }
  if (heldout < 2) throw ConfigError("heldout must be at least 2");
  if (mse.steps < 1 || mse.batch < 1) throw ConfigError("mse.steps and mse.batch must be positive");
  if (sp.steps < 0 || sp.batch < 1) throw ConfigError("sp.steps must be >= 0 and sp.batch positive");
  if (mse.lr < 0.0 || sp.lr < 0.0) throw ConfigError("learning rates must be non-negative");
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ConfigError("ema_decay must lie in [0, 1)");
  if (timesteps < 2) throw ConfigError("schedule.timesteps must be at least 2");
  if (eval_samples < 2) throw ConfigError("eval.samples must be at least 2");
  if (checkpoint_every < 0 || log_every < 1) throw ConfigError("checkpoint_every must be >= 0 and log_every >= 1");
  sp_objective.validate();
  sampler.validate(timesteps);
}

void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "output_dir") {
    cfg.output_dir = value;
    return;
  }
  if (key.rfind("dataset.", 0) == 0) {
    cfg.dataset_params[key.substr(8)] = parse_double(key, value);
    return;
  }
  const Field* f = find_field(key);
  if (f == nullptr) throw ConfigError("unknown config key '" + key + "'");
  f->set(cfg, key, value);
}

ExperimentConfig parse_config_text(const std::string& text) {
  ExperimentConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    set_config_value(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

ExperimentConfig parse_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, f] : fields()) keys.push_back(k);
  keys.push_back("output_dir");
  return keys;
}

std::string canonical_config(const ExperimentConfig& cfg) { return canonical_lines(cfg, false); }

std::string fnv1a64_hex(const std::string& text) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string config_hash(const ExperimentConfig& cfg) { return fnv1a64_hex(canonical_config(cfg)); }

std::string mse_phase_hash(const ExperimentConfig& cfg) { return fnv1a64_hex(canonical_lines(cfg, true)); }

}  // namespace splab
