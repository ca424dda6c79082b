#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace ctrpose {

// Seeded RNG with self-contained distributions so streams are bit-identical
// across standard libraries (std::uniform_real_distribution is not).
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  // Independent stream for item `index` under a master seed; ordering of
  // draws across items becomes irrelevant.
  static Rng ForIndex(uint64_t master_seed, uint64_t index) {
    // splitmix64 mixing keeps streams decorrelated.
    uint64_t z = master_seed + 0x9E3779B97F4A7C15ull * (index + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return Rng(z ^ (z >> 31));
  }

  uint64_t next_u64() { return gen_(); }

  double uniform() {  // [0, 1)
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + uniform() * (hi - lo); }

  int uniform_int(int lo, int hi) {  // inclusive bounds
    return lo + static_cast<int>(uniform() * (static_cast<double>(hi) - lo + 1.0));
  }

  bool bernoulli(double p) { return uniform() < p; }

  double normal() {  // Box-Muller with cached pair
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace ctrpose
