#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "sqr/common.hpp"

namespace sqr {

// splitmix64, used to turn (seed, stream) keys into well-mixed engine seeds
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Deterministic random stream. All variate transforms are implemented here
// rather than with std::*_distribution so that sequences are identical on
// every platform for a given (seed, stream) key.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
      : engine_(mix64(mix64(seed) ^ mix64(stream + 0x51ed270b2f6c87ULL))) {}

  // uniform on (0,1), never exactly 0 or 1
  double uniform() {
    const double u = (engine_() >> 11) * 0x1.0p-53;
    return u == 0.0 ? 0x1.0p-53 : u;
  }

  double uniform(double a, double b) { return a + (b - a) * uniform(); }

  // Marsaglia polar method; caches the second variate
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    has_spare_ = true;
    return u * f;
  }

  // Marsaglia-Tsang for shape >= 1 (all uses here have shape > 1)
  double gamma(double shape) {
    require(shape >= 1.0, "rng: gamma shape must be >= 1");
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  double chi_squared(double df) { return 2.0 * gamma(0.5 * df); }

  int bernoulli(double p) { return uniform() < p ? 1 : 0; }

  std::uint64_t next_u64() { return engine_(); }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace sqr
