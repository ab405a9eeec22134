#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>

#include "blocklora/tensor.hpp"

namespace blocklora {

inline const std::string kHiddenLayer = "fc1";
inline const std::string kOutputLayer = "fc2";

struct ModelDims {
  std::size_t input = 16;
  std::size_t hidden = 64;
  std::size_t output = 16;
};

/// Frozen two-layer network y = W2 tanh(W1 x + b1) + b2. Adapters patch the
/// two affine layers "fc1" (hidden x input) and "fc2" (output x hidden).
struct BaseModel {
  Matrix w1;  // hidden x input
  Matrix b1;  // hidden x 1
  Matrix w2;  // output x hidden
  Matrix b2;  // output x 1

  ModelDims dims() const noexcept { return {w1.cols(), w1.rows(), w2.rows()}; }

  /// layer id -> (output rows, input cols) of each patchable layer.
  std::map<std::string, std::pair<std::size_t, std::size_t>> layer_shapes() const;
  /// layer id -> output rows, the length of that layer's erasure vector.
  std::map<std::string, std::size_t> layer_rows() const;

  /// 16 hex digits of FNV-1a over the dimensions and the f32 encoding of
  /// every weight. Stable across a write/read round trip.
  std::string signature() const;

  /// Throws ShapeError when the four tensors do not conform.
  void validate() const;

  bool operator==(const BaseModel&) const = default;
};

/// Seeded base with W1 ~ N(0, 1/input), W2 ~ N(0, 1/hidden) and small
/// biases. Every weight is rounded to the nearest f32 so the model survives
/// serialization unchanged.
BaseModel make_base_model(std::uint64_t seed, ModelDims dims = {});

}  // namespace blocklora
