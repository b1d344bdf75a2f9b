#include "splab/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstdio>
#include <fstream>

namespace splab {

namespace {

constexpr std::array<char, 8> kMagic{'S', 'P', 'L', 'A', 'B', 'C', 'K', 'P'};
static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void put_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); }

void put_string(std::ostream& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

class Reader {
 public:
  Reader(std::istream& in, std::string path) : in_(in), path_(std::move(path)) {}

  std::uint32_t u32() {
    std::uint32_t v = 0;
    bytes(reinterpret_cast<char*>(&v), sizeof v);
    return v;
  }

  std::string string() {
    std::string s(u32(), '\0');
    bytes(s.data(), s.size());
    return s;
  }

  void bytes(char* dst, std::size_t n) {
    in_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw ConfigError(path_ + ": truncated checkpoint");
  }

  [[noreturn]] void fail(const std::string& what) const { throw ConfigError(path_ + ": " + what); }

 private:
  std::istream& in_;
  std::string path_;
};

}  // namespace

const Tensor& Checkpoint::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw ConfigError("checkpoint has no tensor '" + name + "'");
}

bool Checkpoint::has_tensor(const std::string& name) const {
  return std::any_of(tensors.begin(), tensors.end(), [&](const auto& item) { return item.first == name; });
}

const std::string& Checkpoint::meta_value(const std::string& key) const {
  auto it = meta.find(key);
  if (it == meta.end()) throw ConfigError("checkpoint has no meta entry '" + key + "'");
  return it->second;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write checkpoint " + tmp.string());
    out.write(kMagic.data(), kMagic.size());
    put_u32(out, Checkpoint::kVersion);
    put_u32(out, static_cast<std::uint32_t>(ckpt.kind));
    put_u32(out, static_cast<std::uint32_t>(ckpt.meta.size()));
    for (const auto& [k, v] : ckpt.meta) {
      put_string(out, k);
      put_string(out, v);
    }
    put_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& [name, t] : ckpt.tensors) {
      put_string(out, name);
      put_u32(out, static_cast<std::uint32_t>(t.rank()));
      for (auto d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
      const auto data = t.data();
      out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size_bytes()));
    }
    out.flush();
    if (!out) throw ConfigError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint " + path.string());
  Reader r(in, path.string());
  std::array<char, 8> magic{};
  r.bytes(magic.data(), magic.size());
  if (magic != kMagic) r.fail("not a splab checkpoint");
  if (const auto version = r.u32(); version != Checkpoint::kVersion) {
    r.fail("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  const auto kind = r.u32();
  if (kind > static_cast<std::uint32_t>(ModelKind::TinyUnet)) r.fail("unknown model kind " + std::to_string(kind));
  ckpt.kind = static_cast<ModelKind>(kind);
  const auto n_meta = r.u32();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    auto key = r.string();
    ckpt.meta[key] = r.string();
  }
  const auto n_tensors = r.u32();
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    auto name = r.string();
    const auto rank = r.u32();
    if (rank > 8) r.fail("tensor '" + name + "' has implausible rank");
    Shape shape(rank);
    for (auto& d : shape) d = r.u32();
    std::vector<float> data(shape_numel(shape));
    r.bytes(reinterpret_cast<char*>(data.data()), data.size() * sizeof(float));
    ckpt.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  return ckpt;
}

void put_model_spec(std::map<std::string, std::string>& meta, const ModelSpec& spec) {
  meta["spec.kind"] = to_string(spec.kind);
  meta["spec.num_classes"] = std::to_string(spec.num_classes);
  meta["spec.timesteps"] = std::to_string(spec.timesteps);
  meta["spec.time_embed_dim"] = std::to_string(spec.time_embed_dim);
  meta["spec.class_embed_dim"] = std::to_string(spec.class_embed_dim);
  meta["spec.data_dim"] = std::to_string(spec.data_dim);
  meta["spec.hidden"] = std::to_string(spec.hidden);
  meta["spec.image_size"] = std::to_string(spec.image_size);
  meta["spec.in_channels"] = std::to_string(spec.in_channels);
  meta["spec.channels"] = std::to_string(spec.channels[0]) + "," + std::to_string(spec.channels[1]) + "," +
                          std::to_string(spec.channels[2]);
  meta["spec.groups"] = std::to_string(spec.groups);
  meta["spec.cond_dim"] = std::to_string(spec.cond_dim);
}

ModelSpec get_model_spec(const std::map<std::string, std::string>& meta) {
  auto get = [&](const std::string& key) -> const std::string& {
    auto it = meta.find(key);
    if (it == meta.end()) throw ConfigError("checkpoint meta lacks '" + key + "'");
    return it->second;
  };
  auto get_int = [&](const std::string& key) {
    try {
      return std::stoi(get(key));
    } catch (const std::logic_error&) {
      throw ConfigError("checkpoint meta '" + key + "' is not an integer");
    }
  };
  ModelSpec spec;
  spec.kind = parse_model_kind(get("spec.kind"));
  spec.num_classes = get_int("spec.num_classes");
  spec.timesteps = get_int("spec.timesteps");
  spec.time_embed_dim = get_int("spec.time_embed_dim");
  spec.class_embed_dim = get_int("spec.class_embed_dim");
  spec.data_dim = get_int("spec.data_dim");
  spec.hidden = get_int("spec.hidden");
  spec.image_size = get_int("spec.image_size");
  spec.in_channels = get_int("spec.in_channels");
  const std::string& ch = get("spec.channels");
  if (std::sscanf(ch.c_str(), "%d,%d,%d", &spec.channels[0], &spec.channels[1], &spec.channels[2]) != 3) {
    throw ConfigError("checkpoint meta 'spec.channels' is malformed");
  }
  spec.groups = get_int("spec.groups");
  spec.cond_dim = get_int("spec.cond_dim");
  return spec;
}

void append_parameters(Checkpoint& ckpt, const DenoiserModel& model, const std::string& prefix) {
  for (const auto& [name, t] : model.parameters().items()) ckpt.tensors.emplace_back(prefix + name, t.detach());
}

void load_parameters(const Checkpoint& ckpt, DenoiserModel& model, const std::string& prefix) {
  for (auto& [name, t] : model.parameters().items()) {
    const Tensor& src = ckpt.tensor(prefix + name);
    if (src.shape() != t.shape()) {
      throw ConfigError("checkpoint tensor '" + prefix + name + "' has shape " + shape_str(src.shape()) +
                        ", model expects " + shape_str(t.shape()));
    }
    std::copy(src.data().begin(), src.data().end(), t.data().begin());
  }
}

std::unique_ptr<DenoiserModel> model_from_checkpoint(const Checkpoint& ckpt, const std::string& prefix) {
  const ModelSpec spec = get_model_spec(ckpt.meta);
  if (spec.kind != ckpt.kind) throw ConfigError("checkpoint kind disagrees with its model spec");
  Rng rng(0);
  auto model = DenoiserModel::create(spec, rng);
  load_parameters(ckpt, *model, prefix);
  return model;
}

void save_model(const std::filesystem::path& path, const DenoiserModel& model,
                std::map<std::string, std::string> meta) {
  Checkpoint ckpt;
  ckpt.kind = model.kind();
  ckpt.meta = std::move(meta);
  put_model_spec(ckpt.meta, model.spec());
  append_parameters(ckpt, model, "");
  write_checkpoint(path, ckpt);
}

std::unique_ptr<DenoiserModel> load_model(const std::filesystem::path& path) {
  return model_from_checkpoint(read_checkpoint(path), "");
}

}  // namespace splab
