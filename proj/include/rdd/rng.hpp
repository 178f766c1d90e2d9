#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace rdd {

// splitmix64 finalizer; derives independent sub-seeds from (base, stream).
inline std::uint64_t mix_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// mt19937_64 produces bit-identical streams on every conforming stdlib.
// The distribution transforms are hand-rolled because the std:: ones are
// implementation-defined, and scene/training determinism is a contract.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t bits() { return eng_(); }

  // [0, 1)
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // inclusive on both ends
  int uniform_int(int lo, int hi) {
    if (hi <= lo) return lo;
    std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(eng_() % span);
  }

  // Box-Muller, no cached spare so the stream stays position-deterministic.
  double normal() {
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Knuth's product method; switches to a rounded normal for large lambda
  // (never hit at desk scale, avoids exp underflow).
  int poisson(double lambda) {
    if (lambda <= 0.0) return 0;
    if (lambda > 600.0) {
      double v = lambda + std::sqrt(lambda) * normal();
      return v < 0.0 ? 0 : static_cast<int>(std::lround(v));
    }
    double limit = std::exp(-lambda);
    double p = 1.0;
    int k = 0;
    do {
      ++k;
      p *= uniform();
    } while (p > limit);
    return k - 1;
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace rdd
