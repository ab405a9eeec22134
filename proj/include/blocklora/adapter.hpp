#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "blocklora/rng.hpp"
#include "blocklora/tensor.hpp"

namespace blocklora {

/// Output rows an adapter may modify in one layer, strictly increasing.
using RowBlock = std::vector<std::size_t>;

/// Low-rank residual for one base layer: delta = (M . B) A, where the row
/// mask M keeps only `row_block`. The mask is not stored; rows of B outside
/// the block are kept at exactly zero instead.
struct LoRALayer {
  std::string layer_id;
  Matrix b;  // m x r
  Matrix a;  // r x n
  RowBlock row_block;

  std::size_t rank() const noexcept { return b.cols(); }
  std::size_t out_rows() const noexcept { return b.rows(); }
  std::size_t in_cols() const noexcept { return a.cols(); }

  /// Throws IntegrityError when a structural invariant is broken: shapes,
  /// rank <= min(m, n) / 2, non-empty strictly increasing in-range row
  /// block, and zero B rows outside the block.
  void validate() const;
};

/// Every row index 0..rows-1; the row block of a standard (full-row) adapter.
RowBlock full_rows(std::size_t rows);

/// Fresh layer: A ~ Normal(0, 1/n), B = 0, so the residual starts at zero.
LoRALayer init_layer(RngState& rng, std::string layer_id, std::size_t out_rows,
                     std::size_t in_cols, std::size_t rank, RowBlock row_block);

struct LoRAAdapter {
  std::string concept_name;
  std::map<std::string, LoRALayer> layers;
  double erasure_rate = 0.0;
  std::uint64_t training_seed = 0;
  std::string base_signature;
  double final_train_mse = 0.0;

  /// Validates every layer and the erasure rate.
  void validate() const;
  const LoRALayer& layer(const std::string& layer_id) const;
};

/// Per-layer Bernoulli(1 - lambda) keep vectors (m x 1) applied to residual
/// outputs during training.
struct ErasureMask {
  std::map<std::string, Matrix> layers;

  const Matrix& for_layer(const std::string& layer_id) const;
};

/// (M . B) A as a dense m x n matrix. Rows outside the block are exactly 0.
Matrix delta_weight(const LoRALayer& layer);

/// (M . B)(A x) for x of shape n x batch.
Matrix forward_residual(const LoRALayer& layer, const Matrix& x);
/// As above, with output row p multiplied by the mask entry p.
Matrix forward_residual(const LoRALayer& layer, const Matrix& x, const ErasureMask& mask);

/// One keep vector per layer; throws DomainError unless 0 <= lambda < 1.
ErasureMask sample_erasure_mask(RngState& rng, const std::map<std::string, std::size_t>& layer_dims,
                                double lambda);

void validate_erasure_rate(double lambda);

}  // namespace blocklora
