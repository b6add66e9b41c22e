#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace prf {

// Seeded RNG with a fixed normal-variate algorithm (Box-Muller over the
// engine's raw bits) so streams do not depend on the standard library's
// distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed), seed_mix_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // uniform in [0, 1)
  double uniform() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // inclusive bounds
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    std::uint64_t x;
    do {
      x = eng_();
    } while (x >= limit);
    return lo + static_cast<std::int64_t>(x % span);
  }

  // standard normal
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1, u2;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Derive an independent stream; used to give each frame/epoch its own RNG.
  Rng fork(std::uint64_t stream) const {
    std::uint64_t z = seed_mix_ ^ (stream + 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return Rng(z ^ (z >> 31));
  }

 private:
  std::mt19937_64 eng_;
  std::uint64_t seed_mix_ = 0;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace prf
