#include "blocklora/adapter.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "blocklora/errors.hpp"

namespace blocklora {

namespace {

// Expands the row block into a per-row keep flag.
std::vector<bool> block_flags(const LoRALayer& layer) {
  std::vector<bool> in_block(layer.out_rows(), false);
  for (std::size_t r : layer.row_block) in_block[r] = true;
  return in_block;
}

}  // namespace

void LoRALayer::validate() const {
  const std::string where = "layer '" + layer_id + "': ";
  if (b.cols() != a.rows()) {
    throw IntegrityError(where + "B " + b.shape_string() + " and A " + a.shape_string() +
                         " do not conform");
  }
  const std::size_t limit = std::min(out_rows(), in_cols()) / 2;
  if (rank() > limit) {
    throw IntegrityError(where + "rank " + std::to_string(rank()) + " exceeds min(m, n)/2 = " +
                         std::to_string(limit));
  }
  if (row_block.empty()) throw IntegrityError(where + "row block is empty");
  for (std::size_t i = 0; i < row_block.size(); ++i) {
    if (row_block[i] >= out_rows()) {
      throw IntegrityError(where + "row " + std::to_string(row_block[i]) + " out of range for " +
                           std::to_string(out_rows()) + " rows");
    }
    if (i > 0 && row_block[i] <= row_block[i - 1]) {
      throw IntegrityError(where + "row block is not strictly increasing");
    }
  }
  const auto in_block = block_flags(*this);
  for (std::size_t r = 0; r < out_rows(); ++r) {
    if (in_block[r]) continue;
    for (double v : b.row(r)) {
      if (v != 0.0) {
        throw IntegrityError(where + "B row " + std::to_string(r) +
                             " lies outside the row block but is nonzero");
      }
    }
  }
}

RowBlock full_rows(std::size_t rows) {
  RowBlock block(rows);
  for (std::size_t i = 0; i < rows; ++i) block[i] = i;
  return block;
}

LoRALayer init_layer(RngState& rng, std::string layer_id, std::size_t out_rows,
                     std::size_t in_cols, std::size_t rank, RowBlock row_block) {
  LoRALayer layer{std::move(layer_id), Matrix(out_rows, rank),
                  sample_normal(rng, rank, in_cols, 1.0 / std::sqrt(static_cast<double>(in_cols))),
                  std::move(row_block)};
  layer.validate();
  return layer;
}

void LoRAAdapter::validate() const {
  validate_erasure_rate(erasure_rate);
  for (const auto& [id, layer] : layers) {
    if (id != layer.layer_id) {
      throw IntegrityError("adapter '" + concept_name + "': layer key '" + id +
                           "' does not match layer id '" + layer.layer_id + "'");
    }
    layer.validate();
  }
}

const LoRALayer& LoRAAdapter::layer(const std::string& layer_id) const {
  auto it = layers.find(layer_id);
  if (it == layers.end()) {
    throw LookupError("adapter '" + concept_name + "' does not patch layer '" + layer_id + "'");
  }
  return it->second;
}

const Matrix& ErasureMask::for_layer(const std::string& layer_id) const {
  auto it = layers.find(layer_id);
  if (it == layers.end()) throw LookupError("erasure mask has no entry for layer '" + layer_id + "'");
  return it->second;
}

Matrix delta_weight(const LoRALayer& layer) {
  Matrix delta(layer.out_rows(), layer.in_cols());
  const std::size_t rank = layer.rank();
  for (std::size_t p : layer.row_block) {
    auto out = delta.row(p);
    for (std::size_t k = 0; k < rank; ++k) {
      const double bpk = layer.b(p, k);
      auto a_row = layer.a.row(k);
      for (std::size_t q = 0; q < out.size(); ++q) out[q] += bpk * a_row[q];
    }
  }
  require_finite(delta, "delta_weight");
  return delta;
}

Matrix forward_residual(const LoRALayer& layer, const Matrix& x) {
  if (x.rows() != layer.in_cols()) {
    throw ShapeError("forward_residual: layer '" + layer.layer_id + "' expects " +
                     std::to_string(layer.in_cols()) + " input rows, got x " + x.shape_string());
  }
  const Matrix projected = matmul(layer.a, x);  // r x batch
  Matrix out(layer.out_rows(), x.cols());
  const std::size_t rank = layer.rank();
  for (std::size_t p : layer.row_block) {
    auto out_row = out.row(p);
    for (std::size_t k = 0; k < rank; ++k) {
      const double bpk = layer.b(p, k);
      auto proj_row = projected.row(k);
      for (std::size_t j = 0; j < out_row.size(); ++j) out_row[j] += bpk * proj_row[j];
    }
  }
  require_finite(out, "forward_residual");
  return out;
}

Matrix forward_residual(const LoRALayer& layer, const Matrix& x, const ErasureMask& mask) {
  const Matrix& keep = mask.for_layer(layer.layer_id);
  if (keep.rows() != layer.out_rows() || keep.cols() != 1) {
    throw ShapeError("forward_residual: mask for layer '" + layer.layer_id + "' has shape " +
                     keep.shape_string() + ", expected (" + std::to_string(layer.out_rows()) +
                     "x1)");
  }
  return scale_rows(forward_residual(layer, x), keep);
}

void validate_erasure_rate(double lambda) {
  if (!(lambda >= 0.0 && lambda < 1.0)) {
    throw DomainError("erasure rate must lie in [0, 1), got " + std::to_string(lambda));
  }
}

ErasureMask sample_erasure_mask(RngState& rng, const std::map<std::string, std::size_t>& layer_dims,
                                double lambda) {
  validate_erasure_rate(lambda);
  ErasureMask mask;
  for (const auto& [id, rows] : layer_dims) {
    mask.layers.emplace(id, sample_bernoulli_vector(rng, rows, 1.0 - lambda));
  }
  return mask;
}

}  // namespace blocklora
