#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace fftgan {

using Shape = std::vector<int>;

inline long long numel(const Shape& s) {
  long long n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

[[noreturn]] inline void fail_dims(const std::string& op, const Shape& a, const Shape& b,
                                   const std::string& detail) {
  throw std::invalid_argument(op + ": shapes " + shape_str(a) + " and " + shape_str(b) + " " + detail);
}

// Non-fatal events (sigma==0 in spectral norm, Sinkhorn not converged, pose
// resampling). Default sink is stderr; tests swap it to capture events.
using WarnHandler = void (*)(const std::string&);

inline WarnHandler& warn_handler() {
  static WarnHandler h = nullptr;
  return h;
}

void warn(const std::string& msg);

inline bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

// FNV-1a, used for dataset checksums and seed mixing.
inline std::uint64_t fnv1a(const void* bytes, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace fftgan

#include <cstdio>

namespace fftgan {
inline void warn(const std::string& msg) {
  if (warn_handler()) {
    warn_handler()(msg);
  } else {
    std::fprintf(stderr, "[fftgan] warning: %s\n", msg.c_str());
  }
}
}  // namespace fftgan
