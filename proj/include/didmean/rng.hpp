#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace didmean {

// Stream-seed mixer (splitmix64). Used to derive independent, reproducible
// sub-stream seeds from a master seed without coupling the streams.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a,
                                 std::uint64_t b = 0, std::uint64_t c = 0) {
  std::uint64_t s = splitmix64(master ^ splitmix64(a));
  s = splitmix64(s ^ splitmix64(b + 0x9e3779b97f4a7c15ULL));
  return splitmix64(s ^ splitmix64(c + 0x2545f4914f6cdd1dULL));
}

// mt19937_64 engine with hand-rolled uniform/normal transforms so that a
// given seed reproduces the same stream on every platform (the standard
// distribution adaptors are implementation-defined, which would break the
// frozen fixtures committed to the repo).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // [0, 1), 53-bit resolution.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller. Two uniforms per draw, no caching, so
  // the draw count per call is fixed and parallel streams stay aligned.
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

  // Unbiased draw from {0, ..., n-1}.
  std::uint64_t uniform_index(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  // Fisher-Yates; used instead of std::shuffle for the same portability
  // reason as uniform()/normal().
  template <typename T>
  void shuffle(std::vector<T>& values) {
    for (std::size_t i = values.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform_index(i));
      std::swap(values[i - 1], values[j]);
    }
  }

 private:
  static constexpr double kPi = 3.14159265358979323846;
  std::mt19937_64 engine_;
};

}  // namespace didmean
