#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "vqmim/common.hpp"

namespace vqmim {

// Deterministic random source. The engine is std::mt19937_64 (bit-exact
// across platforms); all value mappings are implemented here instead of
// through std::*_distribution so that a draw consumes a fixed, known amount
// of engine state and checkpointed streams resume exactly.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // [0, 1), 53-bit resolution
  double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // (0, 1]
  double uniform01_open_low() { return static_cast<double>((engine_() >> 11) + 1) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // unbiased integer in [0, n)
  uint64_t bounded(uint64_t n) {
    if (n == 0) throw NumericError("Rng::bounded: n must be positive");
    uint64_t threshold = (~n + 1) % n;  // 2^64 mod n
    uint64_t r = engine_();
    while (r < threshold) r = engine_();
    return r % n;
  }

  int64_t uniform_int(int64_t lo, int64_t hi_inclusive) {
    return lo + static_cast<int64_t>(bounded(static_cast<uint64_t>(hi_inclusive - lo + 1)));
  }

  // Box-Muller, one value per call; no cached state.
  double normal() {
    double u1 = uniform01_open_low();
    double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // standard ViT init: resample outside two standard deviations
  double truncated_normal(double stddev) {
    double z = normal();
    while (std::fabs(z) > 2.0) z = normal();
    return z * stddev;
  }

  std::string save_state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void load_state(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
    if (is.fail()) throw IoError("Rng::load_state: malformed engine state");
  }

  // Independent stream for a named purpose under one run seed.
  static Rng derive(uint64_t seed, const char* stream) {
    uint64_t h = fnv1a64(stream, std::char_traits<char>::length(stream));
    return Rng(seed ^ h);
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace vqmim
