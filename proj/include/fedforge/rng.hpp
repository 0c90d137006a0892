#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace fedforge {

// splitmix64; used to derive independent stream seeds from one root seed.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Deterministic PRNG (xoshiro256**). Distributions are implemented here so
// output does not depend on the standard library version.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t sm = seed;
    for (auto& w : s_) w = splitmix64(sm);
    has_gauss_ = false;
    gauss_ = 0.0;
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // uniform in [0,1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // integer in [0, n)
  std::uint64_t below(std::uint64_t n) {
    // rejection sampling to avoid modulo bias
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  double normal() {
    if (has_gauss_) {
      has_gauss_ = false;
      return gauss_;
    }
    // Marsaglia polar method
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double m = std::sqrt(-2.0 * std::log(s) / s);
    gauss_ = v * m;
    has_gauss_ = true;
    return u * m;
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Marsaglia–Tsang, with the alpha<1 boost.
  double gamma(double alpha) {
    if (alpha < 1.0) {
      const double u = uniform();
      return gamma(alpha + 1.0) * std::pow(u > 0 ? u : 1e-300, 1.0 / alpha);
    }
    const double d = alpha - 1.0 / 3.0;
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

  std::vector<double> dirichlet(double alpha, std::size_t n) {
    std::vector<double> p(n);
    double sum = 0.0;
    for (auto& x : p) {
      x = gamma(alpha);
      sum += x;
    }
    if (sum <= 0.0) {
      for (auto& x : p) x = 1.0 / static_cast<double>(n);
      return p;
    }
    for (auto& x : p) x /= sum;
    return p;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  std::uint64_t s_[4];
  bool has_gauss_;
  double gauss_;
};

// Named substream derivation: every consumer of randomness pulls its own
// stream so ablations perturb only the stream they touch.
inline Rng stream(std::uint64_t root_seed, std::string_view name) {
  return Rng(root_seed ^ fnv1a64(name));
}

inline Rng stream(std::uint64_t root_seed, std::string_view name,
                  std::uint64_t index) {
  std::uint64_t mix = root_seed ^ fnv1a64(name);
  mix ^= 0x9e3779b97f4a7c15ULL * (index + 1);
  return Rng(mix);
}

}  // namespace fedforge
