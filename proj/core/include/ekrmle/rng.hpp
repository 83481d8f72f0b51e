#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>

namespace ekrmle {

/// 64-bit finalizer used both to advance streams and to derive subkeys.
inline std::uint64_t mix64(std::uint64_t z) noexcept {
  z ^= z >> 30;
  z *= 0xBF58476D1CE4E5B9ull;
  z ^= z >> 27;
  z *= 0x94D049BB133111EBull;
  z ^= z >> 31;
  return z;
}

/// Deterministic counter-based random stream (splitmix64 core). Streams are
/// cheap value types; independent substreams are derived by hashing a path
/// of ids into the key, so draw order never couples particles, iterations,
/// or replicates to one another.
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t key) : state_(key) {}

  /// Derive a stream from a seed and a path of ids, e.g.
  /// {tag, replicate, particle, iteration}.
  static RandomStream derive(std::uint64_t seed,
                             std::initializer_list<std::uint64_t> path) {
    std::uint64_t k = mix64(seed + kGamma);
    for (std::uint64_t id : path) k = mix64(k ^ (id + kGamma));
    return RandomStream(k);
  }

  std::uint64_t next_u64() noexcept {
    state_ += kGamma;
    return mix64(state_);
  }

  /// Uniform draw in the open interval (0, 1).
  double uniform() noexcept {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  /// Standard normal via Box-Muller; one spare value is cached per stream.
  double normal() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  Eigen::VectorXd normal_vector(Eigen::Index n) {
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = normal();
    return v;
  }

  /// Column-major fill so a matrix equals its columns drawn one by one.
  Eigen::MatrixXd normal_matrix(Eigen::Index rows, Eigen::Index cols) {
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
      for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = normal();
    return m;
  }

 private:
  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ull;
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Domain tags keeping unrelated draws on disjoint substreams.
namespace stream_tag {
inline constexpr std::uint64_t kInitialEnsemble = 1;
inline constexpr std::uint64_t kPerturbation = 2;
inline constexpr std::uint64_t kDataSynthesis = 3;
inline constexpr std::uint64_t kProblemGeneration = 4;
inline constexpr std::uint64_t kTruth = 5;
}  // namespace stream_tag

/// Seed plus replicate index; every randomized operation derives its own
/// substream from this key, so runs are reproducible and replicates are
/// independent by construction. Particle j at iteration i draws from the
/// substream (seed, replicate, j, i) of the operation's domain tag.
struct StreamKey {
  std::uint64_t seed = 0;
  std::uint64_t replicate = 0;

  RandomStream stream(std::uint64_t tag) const {
    return RandomStream::derive(seed, {tag, replicate});
  }
  RandomStream stream(std::uint64_t tag, std::uint64_t particle,
                      std::uint64_t iteration) const {
    return RandomStream::derive(seed, {tag, replicate, particle, iteration});
  }
};

}  // namespace ekrmle
