#include "blocklora/rng.hpp"

#include <cmath>
#include <numbers>
#include <vector>

#include "blocklora/errors.hpp"

namespace blocklora {

namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

RngState::RngState(std::uint64_t seed) noexcept : seed_(seed), key_(mix64(seed + kGolden)) {}

std::uint64_t RngState::next_u64() noexcept {
  ++counter_;
  return mix64(key_ + counter_ * kGolden);
}

double RngState::uniform() noexcept {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngState::normal() noexcept {
  const double u1 = 1.0 - uniform();  // (0, 1]
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t RngState::below(std::size_t bound) noexcept {
  // Lemire's multiply-shift; bias is < bound / 2^64, irrelevant here.
  __extension__ using u128 = unsigned __int128;
  const u128 product = static_cast<u128>(next_u64()) * static_cast<u128>(bound);
  return static_cast<std::size_t>(product >> 64);
}

RngState RngState::fork(std::uint64_t stream_id) const noexcept {
  return RngState(mix64(seed_ ^ mix64(stream_id + 0x632BE59BD9B4E019ULL)));
}

Matrix sample_bernoulli_vector(RngState& rng, std::size_t length, double keep_prob) {
  if (!(keep_prob >= 0.0 && keep_prob <= 1.0)) {
    throw DomainError("sample_bernoulli_vector: keep_prob must lie in [0, 1], got " +
                      std::to_string(keep_prob));
  }
  std::vector<double> data(length);
  for (double& v : data) v = rng.uniform() < keep_prob ? 1.0 : 0.0;
  return Matrix(length, 1, std::move(data));
}

Matrix sample_normal(RngState& rng, std::size_t rows, std::size_t cols, double stddev) {
  std::vector<double> data(rows * cols);
  for (double& v : data) v = stddev * rng.normal();
  return Matrix(rows, cols, std::move(data));
}

}  // namespace blocklora
