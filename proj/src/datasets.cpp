#include "splab/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

namespace splab {

namespace {

double param(const DatasetParams& p, const std::string& key, double fallback) {
  auto it = p.find(key);
  return it == p.end() ? fallback : it->second;
}

std::size_t count_param(const DatasetParams& p, double fallback) {
  const double n = param(p, "n", fallback);
  if (!(n >= 1.0) || n != std::floor(n)) throw ConfigError("dataset: n must be a positive integer");
  return static_cast<std::size_t>(n);
}

FiniteDataset points_2d(std::vector<float> xy, std::vector<int> labels, int num_classes) {
  FiniteDataset d;
  const std::size_t n = labels.size();
  d.points = Tensor({n, 2}, std::move(xy));
  d.labels = std::move(labels);
  d.num_classes = num_classes;
  for (int k = 0; k < num_classes; ++k) d.class_names.push_back(std::to_string(k));
  return d;
}

FiniteDataset gauss_mixture_8(const DatasetParams& p, Rng& rng) {
  const std::size_t n = count_param(p, 4096);
  const GaussianMixture mix = gauss_mixture_8_spec(p);
  std::vector<float> xy(2 * n);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int k = rng.uniform_int(0, 7);
    labels[i] = k;
    for (std::size_t j = 0; j < 2; ++j) {
      xy[2 * i + j] = static_cast<float>(mix.means[static_cast<std::size_t>(k)][j] +
                                         mix.sigmas[static_cast<std::size_t>(k)] * rng.normal(0.0, 1.0));
    }
  }
  return points_2d(std::move(xy), std::move(labels), 8);
}

FiniteDataset two_moons(const DatasetParams& p, Rng& rng) {
  const std::size_t n = count_param(p, 4096);
  const double noise = param(p, "noise", 0.05);
  std::vector<float> xy(2 * n);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int moon = rng.uniform_int(0, 1);
    const double theta = std::numbers::pi * rng.uniform();
    double x = moon == 0 ? std::cos(theta) : 1.0 - std::cos(theta);
    double y = moon == 0 ? std::sin(theta) : 0.5 - std::sin(theta);
    x += noise * rng.normal(0.0, 1.0);
    y += noise * rng.normal(0.0, 1.0);
    // Centre and scale to roughly unit variance.
    xy[2 * i] = static_cast<float>((x - 0.5) / 0.85);
    xy[2 * i + 1] = static_cast<float>((y - 0.25) / 0.55);
    labels[i] = moon;
  }
  return points_2d(std::move(xy), std::move(labels), 2);
}

FiniteDataset checkerboard(const DatasetParams& p, Rng& rng) {
  const std::size_t n = count_param(p, 4096);
  std::vector<float> xy(2 * n);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int cell = rng.uniform_int(0, 7);
    const int row = cell / 2;
    const int col = 2 * (cell % 2) + (row % 2);
    xy[2 * i] = static_cast<float>(-2.0 + col + rng.uniform());
    xy[2 * i + 1] = static_cast<float>(-2.0 + row + rng.uniform());
    labels[i] = cell;
  }
  return points_2d(std::move(xy), std::move(labels), 8);
}

FiniteDataset shapes16(const DatasetParams& p, Rng& rng) {
  const std::size_t n = count_param(p, 2048);
  std::vector<float> pixels;
  pixels.reserve(n * 256);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int shape = rng.uniform_int(0, 3);
    const double cx = 6.0 + 4.0 * rng.uniform();
    const double cy = 6.0 + 4.0 * rng.uniform();
    const double radius = 4.0 + 2.0 * rng.uniform();
    const auto img = render_shape16(shape, cx, cy, radius);
    pixels.insert(pixels.end(), img.begin(), img.end());
    labels[i] = shape;
  }
  FiniteDataset d;
  d.points = Tensor({n, 1, 16, 16}, std::move(pixels));
  d.labels = std::move(labels);
  d.num_classes = 4;
  d.class_names = {"disk", "square", "triangle", "ring"};
  return d;
}

}  // namespace

GaussianMixture gauss_mixture_8_spec(const DatasetParams& p) {
  const double radius = param(p, "radius", 1.0);
  const double std = param(p, "std", 0.05);
  if (!(radius > 0.0) || !(std >= 0.0)) throw ConfigError("gauss_mixture_8: radius must be > 0 and std >= 0");
  GaussianMixture mix;
  for (int k = 0; k < 8; ++k) {
    const double angle = k * std::numbers::pi / 4.0;
    mix.means.push_back({radius * std::cos(angle), radius * std::sin(angle)});
    mix.sigmas.push_back(std);
    mix.weights.push_back(1.0 / 8.0);
  }
  return mix;
}

std::vector<float> render_shape16(int shape, double cx, double cy, double radius) {
  constexpr int kSize = 16;
  constexpr int kSuper = 4;
  auto inside = [&](double x, double y) {
    const double dx = x - cx, dy = y - cy;
    const double r = std::hypot(dx, dy);
    switch (shape) {
      case 0: return r <= radius;
      case 1: return std::abs(dx) <= 0.8 * radius && std::abs(dy) <= 0.8 * radius;
      case 2: return dy <= 0.8 * radius && dy >= -radius && std::abs(dx) <= (dy + radius) / 1.8;
      case 3: return r <= radius && r >= 0.55 * radius;
      default: throw ContractError("render_shape16: unknown shape class " + std::to_string(shape));
    }
  };
  std::vector<float> img(kSize * kSize);
  for (int y = 0; y < kSize; ++y) {
    for (int x = 0; x < kSize; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSuper; ++sy)
        for (int sx = 0; sx < kSuper; ++sx)
          hits += inside(x + (sx + 0.5) / kSuper, y + (sy + 0.5) / kSuper) ? 1 : 0;
      img[static_cast<std::size_t>(y * kSize + x)] = 2.0f * static_cast<float>(hits) / (kSuper * kSuper) - 1.0f;
    }
  }
  return img;
}

std::vector<std::string> builtin_dataset_names() { return {"gauss_mixture_8", "two_moons", "checkerboard", "shapes16"}; }

FiniteDataset generate_dataset(const std::string& name, const DatasetParams& params, Rng& rng) {
  if (name == "gauss_mixture_8") return gauss_mixture_8(params, rng);
  if (name == "two_moons") return two_moons(params, rng);
  if (name == "checkerboard") return checkerboard(params, rng);
  if (name == "shapes16") return shapes16(params, rng);
  throw ConfigError("unknown dataset '" + name + "'");
}

// ---------------------------------------------------------------------------
// PGM

namespace {

std::string next_token(std::istream& in) {
  std::string tok;
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(c);
  }
  return tok;
}

}  // namespace

PgmImage read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open image " + path.string());
  if (next_token(in) != "P5") throw ConfigError(path.string() + ": not a binary PGM (P5) file");
  PgmImage img;
  try {
    img.width = std::stoi(next_token(in));
    img.height = std::stoi(next_token(in));
    img.maxval = std::stoi(next_token(in));
  } catch (const std::logic_error&) {
    throw ConfigError(path.string() + ": malformed PGM header");
  }
  if (img.width <= 0 || img.height <= 0 || img.maxval <= 0 || img.maxval > 65535) {
    throw ConfigError(path.string() + ": invalid PGM dimensions");
  }
  const std::size_t n = static_cast<std::size_t>(img.width) * static_cast<std::size_t>(img.height);
  img.pixels.resize(n);
  const bool wide = img.maxval > 255;
  std::vector<unsigned char> raw(n * (wide ? 2 : 1));
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size()) throw ConfigError(path.string() + ": truncated PGM data");
  for (std::size_t i = 0; i < n; ++i) {
    img.pixels[i] = wide ? static_cast<std::uint16_t>((raw[2 * i] << 8) | raw[2 * i + 1]) : raw[i];
  }
  return img;
}

void write_pgm(const std::filesystem::path& path, std::span<const float> values, int width, int height,
               const std::vector<std::string>& comments) {
  if (values.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height)) {
    throw DimensionError("write_pgm: pixel count does not match size");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write image " + path.string());
  out << "P5\n";
  for (const auto& c : comments) out << "# " << c << '\n';
  out << width << ' ' << height << "\n255\n";
  for (float v : values) {
    const float clamped = std::clamp(v, -1.0f, 1.0f);
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround((clamped + 1.0f) * 127.5f))));
  }
}

FiniteDataset ingest_images(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw ConfigError("image directory not found: " + dir.string());
  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  FiniteDataset d;
  std::vector<float> pixels;
  int width = -1, height = -1;
  for (std::size_t k = 0; k < class_dirs.size(); ++k) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(class_dirs[k])) {
      if (entry.is_regular_file() && entry.path().extension() == ".pgm") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) continue;
    const int label = d.num_classes++;
    d.class_names.push_back(class_dirs[k].filename().string());
    for (const auto& f : files) {
      const PgmImage img = read_pgm(f);
      if (width < 0) {
        width = img.width;
        height = img.height;
      } else if (img.width != width || img.height != height) {
        throw ConfigError(f.string() + ": image size differs from the rest of the set");
      }
      for (auto px : img.pixels) pixels.push_back(2.0f * static_cast<float>(px) / static_cast<float>(img.maxval) - 1.0f);
      d.labels.push_back(label);
    }
  }
  if (d.labels.empty()) throw ConfigError("no PGM images found under " + dir.string());
  d.points = Tensor({d.labels.size(), 1, static_cast<std::size_t>(height), static_cast<std::size_t>(width)},
                    std::move(pixels));
  return d;
}

FiniteDataset slice_rows(const FiniteDataset& data, std::size_t begin, std::size_t count) {
  if (begin + count > data.size()) throw ContractError("slice_rows: range outside dataset");
  const std::size_t per = data.dim();
  FiniteDataset out;
  Shape shape = data.points.shape();
  shape[0] = count;
  const auto src = data.points.data().subspan(begin * per, count * per);
  out.points = Tensor(shape, std::vector<float>(src.begin(), src.end()));
  if (!data.labels.empty()) {
    out.labels.assign(data.labels.begin() + static_cast<long>(begin), data.labels.begin() + static_cast<long>(begin + count));
  }
  out.num_classes = data.num_classes;
  out.class_names = data.class_names;
  return out;
}

}  // namespace splab
