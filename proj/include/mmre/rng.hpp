#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace mmre {

// All randomness in the project flows through this wrapper around
// std::mt19937_64 (whose output sequence is fixed by the standard).
// Distributions are hand-rolled so generated data is reproducible
// independent of the standard library implementation.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, n). Modulo bias is irrelevant at desk scale.
  uint64_t uniform_u64(uint64_t n) { return n == 0 ? 0 : engine_() % n; }

  int uniform_int(int lo, int hi_inclusive) {
    return lo + static_cast<int>(uniform_u64(static_cast<uint64_t>(hi_inclusive - lo + 1)));
  }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; draws two uniforms per call, no cached spare.
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(2.0 * M_PI * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(uniform_u64(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Derive an independent stream, e.g. one per sample or per epoch.
  static uint64_t mix(uint64_t seed, uint64_t stream) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace mmre
