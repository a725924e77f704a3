#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tsg {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

/// Error type for all precondition / validation failures in the library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

#define TSG_CHECK(cond, msg)                      \
  do {                                            \
    if (!(cond)) {                                \
      std::ostringstream tsg_check_oss_;          \
      tsg_check_oss_ << msg;                      \
      throw ::tsg::Error(tsg_check_oss_.str());   \
    }                                             \
  } while (0)

/// Counter-based deterministic RNG (splitmix64 core). Unlike the std
/// distributions, every draw here is fully specified, so streams are
/// reproducible across platforms and standard library versions.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed * 0x9E3779B97F4A7C15ULL + 0x2545F4914F6CDD1DULL) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1) with 53 bits of mantissa.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n).
  uint64_t uniform_int(uint64_t n) {
    TSG_CHECK(n > 0, "uniform_int: n must be positive");
    // Rejection sampling to avoid modulo bias.
    uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  /// Standard normal via Box-Muller (deterministic, no cached spare).
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  /// Derive an independent stream. Order of forks matters, tags make the
  /// purpose explicit at call sites.
  Rng fork(uint64_t tag) {
    uint64_t s = next_u64();
    return Rng(s ^ (tag * 0xD6E8FEB86659FD93ULL));
  }

 private:
  uint64_t state_;
};

/// FNV-1a over a string, used for seed-stable hashing of ids.
inline uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

/// Combine a base seed with arbitrary tags into a derived seed.
inline uint64_t seed_mix(uint64_t a, uint64_t b) {
  uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline bool all_finite(const Mat& m) { return m.allFinite(); }

/// Intersection over union of two closed intervals. Two equal zero-length
/// intervals count as identical (IoU 1). Inverted intervals are rejected.
inline double interval_iou(double a_lo, double a_hi, double b_lo, double b_hi) {
  TSG_CHECK(a_lo <= a_hi, "interval_iou: inverted interval [" << a_lo << ", " << a_hi << "]");
  TSG_CHECK(b_lo <= b_hi, "interval_iou: inverted interval [" << b_lo << ", " << b_hi << "]");
  double inter = std::min(a_hi, b_hi) - std::max(a_lo, b_lo);
  if (inter < 0.0) return 0.0;
  double uni = std::max(a_hi, b_hi) - std::min(a_lo, b_lo);
  if (uni == 0.0) return 1.0;  // both zero-length at the same point
  return inter / uni;
}

}  // namespace tsg
