#pragma once

#include <cstdint>
#include <random>

namespace sh {

// Deterministic RNG used everywhere randomness is needed. mt19937_64 has a
// standard-specified sequence, and the Gaussian draw is hand-rolled
// (Box-Muller) so results do not depend on the library's distribution
// implementation.
class Rng {
public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  double uniform() {
    // in [0, 1)
    return (eng_() >> 11) * (1.0 / 9007199254740992.0);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  std::uint64_t uniform_int(std::uint64_t n) {
    std::uint64_t bound = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = eng_();
    } while (x >= bound);
    return x % n;
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1, u2;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 6.283185307179586476925287 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  // derive an independent stream (e.g. one per rollout step)
  Rng split() { return Rng(eng_()); }

  std::uint64_t next_u64() { return eng_(); }

private:
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

} // namespace sh
