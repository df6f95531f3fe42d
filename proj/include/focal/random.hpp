#pragma once

#include <cmath>
#include <cstdint>

#include "focal/tensor.hpp"

namespace focal {

// Seeded truncated-normal sampler: Marsaglia polar method over a splitmix64
// stream, rejecting beyond 2 sigma. Self-contained pure arithmetic, so
// identical seeds give identical weights on every platform.
class TruncNormal {
 public:
  explicit TruncNormal(std::uint64_t seed, double stddev = 0.02)
      : state_(seed), stddev_(stddev) {}

  double operator()() {
    for (;;) {
      if (has_spare_) {
        has_spare_ = false;
        if (std::abs(spare_) <= 2.0) return spare_ * stddev_;
        continue;
      }
      double u, v, s;
      do {
        u = 2.0 * uniform01() - 1.0;
        v = 2.0 * uniform01() - 1.0;
        s = u * u + v * v;
      } while (s >= 1.0 || s == 0.0);
      const double f = std::sqrt(-2.0 * std::log(s) / s);
      spare_ = v * f;
      has_spare_ = true;
      const double z = u * f;
      if (std::abs(z) <= 2.0) return z * stddev_;
    }
  }

  void fill(Tensor& t) {
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = (*this)();
  }

 private:
  std::uint64_t next() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  double uniform01() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  std::uint64_t state_ = 0;
  double stddev_ = 0.02;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace focal
