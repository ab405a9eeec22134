#include "blocklora/merge.hpp"

#include <algorithm>
#include <cmath>
#include <iterator>

#include "blocklora/errors.hpp"

namespace blocklora {

namespace {

constexpr double kAlphaTolerance = 1e-9;

std::vector<double> resolved_alphas(const MergeSpec& spec) {
  std::vector<double> alphas;
  alphas.reserve(spec.entries.size());
  double sum = 0.0;
  for (const auto& entry : spec.entries) {
    if (!std::isfinite(entry.alpha) || entry.alpha < 0.0) {
      throw ConstraintError("merge coefficients must be finite and nonnegative, got " +
                            std::to_string(entry.alpha));
    }
    alphas.push_back(entry.alpha);
    sum += entry.alpha;
  }
  if (spec.normalization == Normalization::renormalize) {
    if (!(sum > 0.0)) throw ConstraintError("cannot renormalize coefficients that sum to zero");
    for (double& a : alphas) a /= sum;
  } else if (std::abs(sum - 1.0) > kAlphaTolerance) {
    throw ConstraintError("merge coefficients must sum to 1, got " + std::to_string(sum));
  }
  return alphas;
}

void check_compatible(const MergeSpec& spec, std::optional<std::string_view> base_signature) {
  const LoRAAdapter& reference = *spec.entries.front().adapter;
  for (std::size_t i = 0; i < spec.entries.size(); ++i) {
    const LoRAAdapter& adapter = *spec.entries[i].adapter;
    if (base_signature && adapter.base_signature != *base_signature) {
      throw CompatibilityError("adapter '" + adapter.concept_name + "' was trained against base " +
                               adapter.base_signature + ", target base is " +
                               std::string(*base_signature));
    }
    if (adapter.base_signature != reference.base_signature) {
      throw CompatibilityError("adapters '" + reference.concept_name + "' and '" +
                               adapter.concept_name + "' have different base signatures");
    }
    if (adapter.layers.size() != reference.layers.size()) {
      throw CompatibilityError("adapter '" + adapter.concept_name +
                               "' patches a different set of layers");
    }
    for (const auto& [id, layer] : reference.layers) {
      auto it = adapter.layers.find(id);
      if (it == adapter.layers.end()) {
        throw CompatibilityError("adapter '" + adapter.concept_name + "' does not patch layer '" +
                                 id + "'");
      }
      if (it->second.out_rows() != layer.out_rows() || it->second.in_cols() != layer.in_cols()) {
        throw CompatibilityError("layer '" + id + "' shape differs between '" +
                                 reference.concept_name + "' and '" + adapter.concept_name + "'");
      }
    }
  }
}

RowBlock intersect(const RowBlock& a, const RowBlock& b) {
  RowBlock out;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out;
}

std::vector<RowOverlap> overlaps_of(
    const std::vector<const std::map<std::string, RowBlock>*>& blocks) {
  std::vector<RowOverlap> report;
  std::map<std::string, bool> layer_ids;
  for (const auto* per_layer : blocks)
    for (const auto& [id, rows] : *per_layer) layer_ids[id] = true;
  for (const auto& [id, unused] : layer_ids) {
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      auto it_i = blocks[i]->find(id);
      if (it_i == blocks[i]->end()) continue;
      for (std::size_t j = i + 1; j < blocks.size(); ++j) {
        auto it_j = blocks[j]->find(id);
        if (it_j == blocks[j]->end()) continue;
        RowBlock shared = intersect(it_i->second, it_j->second);
        if (!shared.empty()) report.push_back({id, i, j, std::move(shared)});
      }
    }
  }
  return report;
}

std::map<std::string, RowBlock> blocks_of(const LoRAAdapter& adapter) {
  std::map<std::string, RowBlock> blocks;
  for (const auto& [id, layer] : adapter.layers) blocks.emplace(id, layer.row_block);
  return blocks;
}

}  // namespace

MergeSpec MergeSpec::uniform(const std::vector<std::shared_ptr<const LoRAAdapter>>& adapters) {
  MergeSpec spec;
  const double alpha = adapters.empty() ? 0.0 : 1.0 / static_cast<double>(adapters.size());
  for (const auto& adapter : adapters) spec.entries.push_back({adapter, alpha});
  return spec;
}

MergeSpec MergeSpec::weighted(const std::vector<std::shared_ptr<const LoRAAdapter>>& adapters,
                              const std::vector<double>& alphas, Normalization normalization) {
  if (alphas.size() != adapters.size()) {
    throw ConstraintError("got " + std::to_string(alphas.size()) + " coefficients for " +
                          std::to_string(adapters.size()) + " adapters");
  }
  MergeSpec spec;
  spec.normalization = normalization;
  for (std::size_t i = 0; i < adapters.size(); ++i) spec.entries.push_back({adapters[i], alphas[i]});
  return spec;
}

MergedModel merge_weighted(const MergeSpec& spec, std::optional<std::string_view> base_signature) {
  if (spec.entries.empty()) throw ArityError("merge requires at least one adapter");
  for (const auto& entry : spec.entries) {
    if (!entry.adapter) throw PreconditionError("merge entry has no adapter");
  }
  const std::vector<double> alphas = resolved_alphas(spec);
  check_compatible(spec, base_signature);

  MergedModel merged;
  merged.base_signature = spec.entries.front().adapter->base_signature;
  for (const auto& [id, layer] : spec.entries.front().adapter->layers) {
    Matrix residual(layer.out_rows(), layer.in_cols());
    for (std::size_t i = 0; i < spec.entries.size(); ++i) {
      const LoRALayer& source = spec.entries[i].adapter->layer(id);
      const Matrix delta = delta_weight(source);
      // Only rows in the block can be nonzero; other rows would add +0.
      for (std::size_t p : source.row_block) {
        auto out = residual.row(p);
        auto in = delta.row(p);
        for (std::size_t q = 0; q < out.size(); ++q) out[q] += alphas[i] * in[q];
      }
    }
    merged.layers.emplace(id, std::move(residual));
  }
  for (std::size_t i = 0; i < spec.entries.size(); ++i) {
    const LoRAAdapter& adapter = *spec.entries[i].adapter;
    merged.provenance.push_back({adapter.concept_name, alphas[i], blocks_of(adapter)});
  }
  return merged;
}

std::vector<RowOverlap> validate_disjointness(const MergeSpec& spec) {
  std::vector<std::map<std::string, RowBlock>> owned;
  owned.reserve(spec.entries.size());
  for (const auto& entry : spec.entries) {
    owned.push_back(entry.adapter ? blocks_of(*entry.adapter) : std::map<std::string, RowBlock>{});
  }
  std::vector<const std::map<std::string, RowBlock>*> blocks;
  for (const auto& b : owned) blocks.push_back(&b);
  return overlaps_of(blocks);
}

std::vector<RowOverlap> validate_disjointness(const std::vector<ProvenanceEntry>& provenance) {
  std::vector<const std::map<std::string, RowBlock>*> blocks;
  for (const auto& entry : provenance) blocks.push_back(&entry.row_blocks);
  return overlaps_of(blocks);
}

std::map<std::string, Matrix> extract_concept_slice(const MergedModel& merged,
                                                    const std::string& concept_name) {
  auto it = std::find_if(merged.provenance.begin(), merged.provenance.end(),
                         [&](const ProvenanceEntry& e) { return e.concept_name == concept_name; });
  if (it == merged.provenance.end()) {
    throw LookupError("concept '" + concept_name + "' is not part of this merge");
  }
  if (!validate_disjointness(merged.provenance).empty()) {
    throw PreconditionError("cannot extract '" + concept_name +
                            "': merged row blocks overlap, slices are not separable");
  }
  std::map<std::string, Matrix> slice;
  for (const auto& [id, residual] : merged.layers) {
    Matrix out(residual.rows(), residual.cols());
    auto block = it->row_blocks.find(id);
    if (block != it->row_blocks.end()) {
      for (std::size_t p : block->second) {
        auto src = residual.row(p);
        std::copy(src.begin(), src.end(), out.row(p).begin());
      }
    }
    slice.emplace(id, std::move(out));
  }
  return slice;
}

}  // namespace blocklora
