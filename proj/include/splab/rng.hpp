#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace splab {

/// Seeded random source. Every random draw in the library goes through one of
/// these so that a (seed, stream) pair fully determines a run.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);
  /// Independent stream derived from a base seed and a list of stream ids
  /// (e.g. {phase, step}).
  Rng(std::uint64_t seed, std::initializer_list<std::uint64_t> stream);

  /// Uniform integer in the closed range [lo, hi].
  int uniform_int(int lo, int hi);
  /// Uniform double in [0, 1).
  double uniform();
  float normal();
  double normal(double mean, double stddev);
  bool bernoulli(double p);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<float> normal_{0.0f, 1.0f};
};

}  // namespace splab
