#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace qnerf {

// ---------------------------------------------------------------------------
// Error taxonomy. The CLI maps these onto exit codes:
//   ConfigError/DomainError -> 2, NumericError (and derived) -> 3,
//   IoError/FormatError -> 4.
// ---------------------------------------------------------------------------

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainingError : NumericError {
  int step;
  TrainingError(const std::string& msg, int step_index)
      : NumericError(msg + " (step " + std::to_string(step_index) + ")"),
        step(step_index) {}
};

struct EvalError : NumericError {
  using NumericError::NumericError;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FormatError : IoError {
  using IoError::IoError;
};

// ---------------------------------------------------------------------------
// Deterministic RNG. Every consumer derives its own stream from a base seed
// and a fixed path of ids, so results never depend on evaluation order or
// thread count. Distributions are hand-rolled (no std::*_distribution) so a
// stream is reproducible bit-for-bit on any standard library.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base,
                                 std::initializer_list<std::uint64_t> path) {
  std::uint64_t s = base;
  (void)splitmix64(s);
  for (std::uint64_t p : path) {
    s ^= p + 0x9e3779b97f4a7c15ULL + (s << 6) + (s >> 2);
    (void)splitmix64(s);
  }
  return s;
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {
    // warm up so small seeds decorrelate
    next_u64();
    next_u64();
  }

  std::uint64_t next_u64() { return splitmix64(state_); }

  // uniform in [0, 1)
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // standard normal via Box-Muller, pair-cached
  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    cached_ = r * std::sin(a);
    have_cached_ = true;
    return r * std::cos(a);
  }

  int uniform_int(int n) {
    return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n));
  }

 private:
  std::uint64_t state_;
  double cached_ = 0.0;
  bool have_cached_ = false;
};

// ---------------------------------------------------------------------------
// Layer specs and token grids
// ---------------------------------------------------------------------------

// One self-attention layer: a square token grid of side `resolution`,
// `channels` query channels per token.
struct LayerSpec {
  int id = 0;
  int resolution = 0;
  int channels = 0;

  bool operator==(const LayerSpec&) const = default;
};

// A square grid of feature vectors. Tokens are stored row-major
// (token = i * res + j), channels along Eigen columns.
struct TokenGrid {
  int res = 0;
  Eigen::MatrixXd values;  // (res*res) x channels

  TokenGrid() = default;
  TokenGrid(int resolution, int channels)
      : res(resolution),
        values(Eigen::MatrixXd::Zero(resolution * resolution, channels)) {}

  int channels() const { return static_cast<int>(values.cols()); }
  int tokens() const { return static_cast<int>(values.rows()); }

  double& at(int i, int j, int c) { return values(i * res + j, c); }
  double at(int i, int j, int c) const { return values(i * res + j, c); }
};

// Per-view, per-layer query grids extracted at one denoising timestep.
struct QuerySet {
  int timestep = 0;
  std::vector<std::vector<TokenGrid>> views;  // [view][layer]

  int view_count() const { return static_cast<int>(views.size()); }
};

// ---------------------------------------------------------------------------
// Deterministic parallelism. Work is split into fixed blocks; workers claim
// blocks from an atomic counter but write only into per-block slots, so the
// result of any reduction done in block order is independent of the number
// of workers.
// ---------------------------------------------------------------------------

void set_thread_count(int n);  // 0 = hardware concurrency
int thread_count();

// Runs fn(begin, end) for consecutive index ranges [begin, end) covering
// [0, n). Ranges are disjoint; fn must only touch state owned by its range.
void parallel_ranges(int n, int block_size,
                     const std::function<void(int, int)>& fn);

// ---------------------------------------------------------------------------
// Locale-independent number formatting for CSV and logs.
// ---------------------------------------------------------------------------

std::string format_double(double v);
std::string format_double(double v, int precision);

}  // namespace qnerf
