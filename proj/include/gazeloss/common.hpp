#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace gazeloss {

template <typename S>
using VecX = Eigen::Array<S, Eigen::Dynamic, 1>;

/// Row-major 2-D grid, the working type for heatmaps and collapsed feature maps.
template <typename S>
using GridX = Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// ---------------------------------------------------------------------------
// Errors. Every error carries a short machine-parsable code; the CLI prints
// "<code>: <message>" on a single line and exits nonzero.
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& msg)
      : std::runtime_error(msg), code_(std::move(code)) {}
  const std::string& code() const { return code_; }

 private:
  std::string code_;
};

struct DimensionError : Error {
  explicit DimensionError(const std::string& m) : Error("E_DIMENSION", m) {}
};
struct ContractError : Error {
  explicit ContractError(const std::string& m) : Error("E_CONTRACT", m) {}
};
struct IndexError : Error {
  explicit IndexError(const std::string& m) : Error("E_INDEX", m) {}
};
struct FormatError : Error {
  explicit FormatError(const std::string& m) : Error("E_FORMAT", m) {}
};
struct ParseError : Error {
  explicit ParseError(const std::string& m) : Error("E_PARSE", m) {}
};
struct ValidationError : Error {
  explicit ValidationError(const std::string& m) : Error("E_VALIDATION", m) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error("E_CONFIG", m) {}
};
struct IoError : Error {
  explicit IoError(const std::string& m) : Error("E_IO", m) {}
};

// ---------------------------------------------------------------------------
// Deterministic randomness. std::mt19937_64 is bit-exactly specified by the
// standard; the distribution helpers below extract floats with a fixed
// recipe, so identical seeds reproduce identical streams on any platform
// (the std::* distributions make no such guarantee).
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  /// Uniform in [0, 1) with 53 random mantissa bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform_in(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). n must be positive.
  uint64_t uniform_int(uint64_t n) {
    // Rejection sampling keeps the draw unbiased and deterministic.
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t v = engine_();
    while (v >= limit) v = engine_();
    return v % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller (one value per call, cached pair).
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

/// SplitMix64 mix, used to derive independent per-item seeds from a base seed.
inline uint64_t derive_seed(uint64_t base, uint64_t stream) {
  uint64_t z = base + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// Worker threads. GAZELOSS_THREADS caps the pool used by embarrassingly
// parallel helpers (dataset generation, batch evaluation). Training steps
// stay on one thread per the graph confinement rule.
// ---------------------------------------------------------------------------

inline int worker_thread_cap() {
  int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (hw <= 0) hw = 1;
  if (const char* env = std::getenv("GAZELOSS_THREADS")) {
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    if (end != env && v >= 1) hw = std::min<long>(hw, v);
  }
  return hw;
}

/// Runs fn(i) for i in [0, n). Results must not depend on scheduling; callers
/// pass index-derived seeds to keep outputs deterministic.
inline void parallel_for(int64_t n, const std::function<void(int64_t)>& fn) {
  const int threads = std::min<int64_t>(worker_thread_cap(), n);
  if (threads <= 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads);
  std::atomic<int64_t> next{0};
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (int64_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

/// FNV-1a over a byte range; content hashes in run manifests use this.
inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace gazeloss
