#include "blocklora/block_allocation.hpp"

#include <optional>
#include <vector>

#include "blocklora/errors.hpp"

namespace blocklora {

namespace {

std::vector<bool> occupancy(std::size_t rows, const std::map<std::size_t, RowBlock>& assigned) {
  std::vector<bool> used(rows, false);
  for (const auto& [slot, block] : assigned)
    for (std::size_t r : block) used[r] = true;
  return used;
}

bool range_free(const std::vector<bool>& used, std::size_t start, std::size_t size) {
  if (start + size > used.size()) return false;
  for (std::size_t r = start; r < start + size; ++r)
    if (used[r]) return false;
  return true;
}

std::optional<std::size_t> first_fit(const std::vector<bool>& used, std::size_t size) {
  std::size_t run = 0;
  for (std::size_t r = 0; r < used.size(); ++r) {
    run = used[r] ? 0 : run + 1;
    if (run == size) return r + 1 - size;
  }
  return std::nullopt;
}

}  // namespace

BlockAllocation::BlockAllocation(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw AllocationError("block allocation capacity must be positive");
}

void BlockAllocation::add_layer(const std::string& layer_id, std::size_t rows) {
  if (rows == 0) throw ShapeError("layer '" + layer_id + "' must have at least one row");
  auto [it, inserted] = rows_.emplace(layer_id, rows);
  if (!inserted && it->second != rows) {
    throw ShapeError("layer '" + layer_id + "' already registered with " +
                     std::to_string(it->second) + " rows, not " + std::to_string(rows));
  }
  assigned_[layer_id];
}

std::size_t BlockAllocation::layer_rows(const std::string& layer_id) const {
  auto it = rows_.find(layer_id);
  if (it == rows_.end()) throw LookupError("layer '" + layer_id + "' is not registered");
  return it->second;
}

std::size_t BlockAllocation::default_block_size(const std::string& layer_id) const {
  const std::size_t rows = layer_rows(layer_id);
  const std::size_t size = rows / capacity_;
  if (size == 0) {
    throw AllocationError("layer '" + layer_id + "' has " + std::to_string(rows) +
                          " rows, fewer than capacity " + std::to_string(capacity_));
  }
  return size;
}

RowBlock BlockAllocation::allocate_block(std::size_t slot, const std::string& layer_id,
                                         std::size_t block_size) {
  const std::size_t rows = layer_rows(layer_id);
  if (slot >= capacity_) {
    throw AllocationError("slot " + std::to_string(slot) + " exceeds capacity " +
                          std::to_string(capacity_) + " (slots are 0-indexed)");
  }
  if (block_size == 0) throw AllocationError("block size must be positive");
  auto& layer_assigned = assigned_[layer_id];
  if (layer_assigned.contains(slot)) {
    throw AllocationError("slot " + std::to_string(slot) + " already holds rows in layer '" +
                          layer_id + "'");
  }
  const auto used = occupancy(rows, layer_assigned);
  std::optional<std::size_t> start;
  if (range_free(used, slot * block_size, block_size)) {
    start = slot * block_size;
  } else {
    start = first_fit(used, block_size);
  }
  if (!start) {
    throw AllocationError("layer '" + layer_id + "': cannot place " + std::to_string(block_size) +
                          " contiguous rows, " + std::to_string(free_rows(layer_id)) +
                          " rows remain unassigned");
  }
  RowBlock block(block_size);
  for (std::size_t i = 0; i < block_size; ++i) block[i] = *start + i;
  layer_assigned.emplace(slot, block);
  return block;
}

void BlockAllocation::assign_block(std::size_t slot, const std::string& layer_id, RowBlock rows) {
  const std::size_t total = layer_rows(layer_id);
  if (slot >= capacity_) {
    throw AllocationError("slot " + std::to_string(slot) + " exceeds capacity " +
                          std::to_string(capacity_));
  }
  auto& layer_assigned = assigned_[layer_id];
  if (layer_assigned.contains(slot)) {
    throw AllocationError("slot " + std::to_string(slot) + " already holds rows in layer '" +
                          layer_id + "'");
  }
  const auto used = occupancy(total, layer_assigned);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= total || used[rows[i]] || (i > 0 && rows[i] <= rows[i - 1])) {
      throw AllocationError("layer '" + layer_id + "': row " + std::to_string(rows[i]) +
                            " is out of range, out of order, or already assigned");
    }
  }
  layer_assigned.emplace(slot, std::move(rows));
}

std::map<std::string, RowBlock> BlockAllocation::allocate_slot(std::size_t slot) {
  std::map<std::string, RowBlock> blocks;
  for (const auto& [id, rows] : rows_) blocks.emplace(id, allocate_block(slot, id));
  return blocks;
}

const RowBlock& BlockAllocation::assigned(const std::string& layer_id, std::size_t slot) const {
  const auto& per_slot = assignments(layer_id);
  auto it = per_slot.find(slot);
  if (it == per_slot.end()) {
    throw LookupError("slot " + std::to_string(slot) + " has no rows in layer '" + layer_id + "'");
  }
  return it->second;
}

const std::map<std::size_t, RowBlock>& BlockAllocation::assignments(
    const std::string& layer_id) const {
  auto it = assigned_.find(layer_id);
  if (it == assigned_.end()) throw LookupError("layer '" + layer_id + "' is not registered");
  return it->second;
}

std::size_t BlockAllocation::free_rows(const std::string& layer_id) const {
  std::size_t used = 0;
  for (const auto& [slot, block] : assignments(layer_id)) used += block.size();
  return layer_rows(layer_id) - used;
}

}  // namespace blocklora
