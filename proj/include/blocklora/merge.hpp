#pragma once

#include <cstddef>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "blocklora/adapter.hpp"
#include "blocklora/tensor.hpp"

namespace blocklora {

/// How merge_weighted treats coefficients that do not sum to one.
enum class Normalization {
  strict,       // reject unless sum(alpha) == 1 within 1e-9
  renormalize,  // divide every alpha by their sum
};

struct MergeEntry {
  std::shared_ptr<const LoRAAdapter> adapter;
  double alpha = 0.0;
};

struct MergeSpec {
  std::vector<MergeEntry> entries;
  Normalization normalization = Normalization::strict;

  /// alpha_i = 1/n for every adapter.
  static MergeSpec uniform(const std::vector<std::shared_ptr<const LoRAAdapter>>& adapters);
  static MergeSpec weighted(const std::vector<std::shared_ptr<const LoRAAdapter>>& adapters,
                            const std::vector<double>& alphas,
                            Normalization normalization = Normalization::strict);
};

struct ProvenanceEntry {
  std::string concept_name;
  double alpha = 0.0;
  std::map<std::string, RowBlock> row_blocks;

  bool operator==(const ProvenanceEntry&) const = default;
};

/// Base weights plus a dense merged residual per layer. A model with no
/// layers carries a zero residual everywhere.
struct MergedModel {
  std::string base_signature;
  std::map<std::string, Matrix> layers;
  std::vector<ProvenanceEntry> provenance;
};

/// Per layer: sum_i alpha_i * delta_weight(layer_i), accumulated in entry
/// order. When `base_signature` is given every adapter must match it.
MergedModel merge_weighted(const MergeSpec& spec,
                           std::optional<std::string_view> base_signature = std::nullopt);

struct RowOverlap {
  std::string layer_id;
  std::size_t first = 0;   // entry index
  std::size_t second = 0;  // entry index, > first
  RowBlock rows;

  bool operator==(const RowOverlap&) const = default;
};

/// All (layer, pair) combinations whose row blocks intersect. Never throws
/// on incompatible input; layers missing from an adapter are skipped.
std::vector<RowOverlap> validate_disjointness(const MergeSpec& spec);
std::vector<RowOverlap> validate_disjointness(const std::vector<ProvenanceEntry>& provenance);

/// Merged residual restricted to the concept's row block (other rows zero).
/// For a disjoint merge this equals alpha_i * delta_weight_i bit for bit.
std::map<std::string, Matrix> extract_concept_slice(const MergedModel& merged,
                                                    const std::string& concept_name);

}  // namespace blocklora
