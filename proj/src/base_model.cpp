#include "blocklora/base_model.hpp"

#include <bit>
#include <cmath>
#include <cstdio>

#include "blocklora/errors.hpp"
#include "blocklora/rng.hpp"

namespace blocklora {

namespace {

Matrix round_to_f32(Matrix m) {
  for (double& v : m.data()) v = static_cast<double>(static_cast<float>(v));
  return m;
}

class Fnv1a {
 public:
  void bytes(std::uint64_t value, int count) {
    for (int i = 0; i < count; ++i) {
      hash_ ^= (value >> (8 * i)) & 0xFFu;
      hash_ *= 0x100000001B3ULL;
    }
  }
  void matrix(const Matrix& m) {
    bytes(m.rows(), 8);
    bytes(m.cols(), 8);
    for (double v : m.data()) bytes(std::bit_cast<std::uint32_t>(static_cast<float>(v)), 4);
  }
  std::uint64_t value() const { return hash_; }

 private:
  std::uint64_t hash_ = 0xCBF29CE484222325ULL;
};

}  // namespace

std::map<std::string, std::pair<std::size_t, std::size_t>> BaseModel::layer_shapes() const {
  return {{kHiddenLayer, {w1.rows(), w1.cols()}}, {kOutputLayer, {w2.rows(), w2.cols()}}};
}

std::map<std::string, std::size_t> BaseModel::layer_rows() const {
  return {{kHiddenLayer, w1.rows()}, {kOutputLayer, w2.rows()}};
}

std::string BaseModel::signature() const {
  Fnv1a h;
  h.matrix(w1);
  h.matrix(b1);
  h.matrix(w2);
  h.matrix(b2);
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h.value()));
  return buf;
}

void BaseModel::validate() const {
  if (b1.rows() != w1.rows() || b1.cols() != 1 || w2.cols() != w1.rows() ||
      b2.rows() != w2.rows() || b2.cols() != 1) {
    throw ShapeError("base model tensors do not conform: W1 " + w1.shape_string() + ", b1 " +
                     b1.shape_string() + ", W2 " + w2.shape_string() + ", b2 " +
                     b2.shape_string());
  }
}

BaseModel make_base_model(std::uint64_t seed, ModelDims dims) {
  RngState rng(seed);
  RngState weights = rng.fork(1);
  RngState biases = rng.fork(2);
  BaseModel base{
      round_to_f32(sample_normal(weights, dims.hidden, dims.input,
                                 1.0 / std::sqrt(static_cast<double>(dims.input)))),
      round_to_f32(sample_normal(biases, dims.hidden, 1, 0.1)),
      round_to_f32(sample_normal(weights, dims.output, dims.hidden,
                                 1.0 / std::sqrt(static_cast<double>(dims.hidden)))),
      round_to_f32(sample_normal(biases, dims.output, 1, 0.1)),
  };
  base.validate();
  return base;
}

}  // namespace blocklora
