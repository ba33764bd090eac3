#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace ean {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Single seedable random stream used everywhere a stochastic choice is made.
// Distribution transforms are hand-rolled on top of mt19937_64 so that a seed
// pins the produced values bit-exactly (std::*_distribution is
// implementation-defined). Sub-streams for parallel work are derived with
// `derived`, never by sharing one stream across threads.
class RandomStream {
 public:
  explicit RandomStream(uint64_t seed) : engine_(seed) {}

  static RandomStream derived(uint64_t base_seed, uint64_t stream_id) {
    return RandomStream(splitmix64(base_seed ^ splitmix64(stream_id)));
  }

  uint64_t next_u64() { return engine_(); }

  // [0, 1)
  double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // (0, 1) strictly
  double uniform_open01() {
    return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
  }

  // (-1, 1) strictly: never hits either endpoint
  double uniform_sym() { return 2.0 * uniform_open01() - 1.0; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Box-Muller; always consumes exactly two engine draws (no cached spare)
  double normal(double mean = 0.0, double stddev = 1.0) {
    const double u1 = uniform_open01();
    const double u2 = uniform01();
    const double mag = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * mag * std::cos(2.0 * std::numbers::pi * u2);
  }

  // [0, n) without modulo bias
  uint64_t uniform_index(uint64_t n) {
    const uint64_t limit = n * (UINT64_MAX / n);
    uint64_t v = engine_();
    while (v >= limit) v = engine_();
    return v % n;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[uniform_index(i)]);
    }
  }

  std::string save_state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void load_state(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace ean
