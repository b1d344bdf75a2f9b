#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "splab/oracles.hpp"
#include "splab/rng.hpp"

namespace splab {

using DatasetParams = std::map<std::string, double>;

/// Builtin toy datasets, deterministic given the rng state:
///   gauss_mixture_8  8 isotropic modes on a circle (params: n, radius, std); label = mode
///   two_moons        interleaved half circles (params: n, noise); label = moon
///   checkerboard     uniform over the dark cells of a 4x4 board on [-2, 2]^2 (params: n); label = cell
///   shapes16         16x16 grayscale shapes in [-1, 1] (params: n); label = shape class
/// Throws ConfigError for unknown names.
FiniteDataset generate_dataset(const std::string& name, const DatasetParams& params, Rng& rng);

/// Names accepted by generate_dataset.
std::vector<std::string> builtin_dataset_names();

/// Means/std of the gauss_mixture_8 generator for the given parameters.
GaussianMixture gauss_mixture_8_spec(const DatasetParams& params);

/// Single 16x16 shape image in [-1, 1] for class `shape` (0 disk, 1 square,
/// 2 triangle, 3 ring) centred at (cx, cy) with the given radius in pixels.
std::vector<float> render_shape16(int shape, double cx, double cy, double radius);

/// Reads binary PGM (P5) files from the subdirectories of `dir`; each
/// subdirectory name is a class (sorted lexicographically). Pixel values are
/// mapped to [-1, 1]. All images must share one size.
FiniteDataset ingest_images(const std::filesystem::path& dir);

struct PgmImage {
  int width = 0;
  int height = 0;
  int maxval = 255;
  std::vector<std::uint16_t> pixels;
};

PgmImage read_pgm(const std::filesystem::path& path);
/// Writes values in [-1, 1] (clamped) as an 8-bit P5 image; `comment` lines
/// are embedded in the header.
void write_pgm(const std::filesystem::path& path, std::span<const float> values, int width, int height,
               const std::vector<std::string>& comments = {});

/// Rows [begin, begin + count) of a dataset, with labels.
FiniteDataset slice_rows(const FiniteDataset& data, std::size_t begin, std::size_t count);

}  // namespace splab
