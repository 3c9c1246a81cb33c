#pragma once

#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <string>

namespace vqmim {

// Error taxonomy used across the library. The CLI maps ConfigError (and
// IoError) to exit code 2 and NumericError to exit code 3.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex_u64(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

// Worker count for read-only corpus sharding (tokenization, feature
// extraction). Training loops stay single-threaded.
inline int worker_count() {
  const char* env = std::getenv("VQMIM_THREADS");
  if (env == nullptr) return 1;
  long v = std::strtol(env, nullptr, 10);
  if (v < 1) return 1;
  if (v > 64) return 64;
  return static_cast<int>(v);
}

}  // namespace vqmim
