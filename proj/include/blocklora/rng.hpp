#pragma once

#include <cstddef>
#include <cstdint>

#include "blocklora/tensor.hpp"

namespace blocklora {

/// Counter-based generator: the n-th draw is a pure function of (seed, n),
/// computed with the SplitMix64 finalizer. Streams are identical across
/// platforms because only integer arithmetic is involved up to the final
/// conversion to double.
///
/// Single-owner. Use fork() to hand independent streams to sub-tasks.
class RngState {
 public:
  explicit RngState(std::uint64_t seed) noexcept;

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next_u64() noexcept;
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept;
  /// Standard normal via Box-Muller (one value per two uniforms).
  double normal() noexcept;
  /// Uniform integer in [0, bound); bound must be positive.
  std::size_t below(std::size_t bound) noexcept;

  /// Child generator whose stream is derived from (seed, stream_id) only,
  /// independent of how far this generator has advanced.
  RngState fork(std::uint64_t stream_id) const noexcept;

 private:
  std::uint64_t seed_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

/// length x 1 vector of independent Bernoulli(keep_prob) draws in {0, 1}.
Matrix sample_bernoulli_vector(RngState& rng, std::size_t length, double keep_prob);

/// rows x cols matrix of independent Normal(0, stddev^2) draws.
Matrix sample_normal(RngState& rng, std::size_t rows, std::size_t cols, double stddev = 1.0);

}  // namespace blocklora
