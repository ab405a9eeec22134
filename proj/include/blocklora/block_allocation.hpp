#pragma once

#include <cstddef>
#include <map>
#include <string>

#include "blocklora/adapter.hpp"

namespace blocklora {

/// Registry of pairwise-disjoint row blocks per layer for up to `capacity`
/// adapter slots.
///
/// Blocks are contiguous. A request for `slot` is placed at rows
/// [slot * size, (slot + 1) * size) whenever those rows are free, so two
/// processes that build the same allocation independently agree on the
/// block of any slot. Otherwise the lowest free contiguous run is used.
class BlockAllocation {
 public:
  explicit BlockAllocation(std::size_t capacity);

  std::size_t capacity() const noexcept { return capacity_; }

  /// Registers a layer with `rows` output rows. Re-registering with the same
  /// row count is a no-op; a different count is a ShapeError.
  void add_layer(const std::string& layer_id, std::size_t rows);
  std::size_t layer_rows(const std::string& layer_id) const;
  const std::map<std::string, std::size_t>& layers() const noexcept { return rows_; }

  /// floor(rows / capacity); AllocationError if that is zero.
  std::size_t default_block_size(const std::string& layer_id) const;

  RowBlock allocate_block(std::size_t slot, const std::string& layer_id, std::size_t block_size);
  RowBlock allocate_block(std::size_t slot, const std::string& layer_id) {
    return allocate_block(slot, layer_id, default_block_size(layer_id));
  }

  /// Records an explicit block (used when restoring a saved allocation).
  /// Throws AllocationError if it overlaps an existing block or the slot is
  /// taken.
  void assign_block(std::size_t slot, const std::string& layer_id, RowBlock rows);

  /// Allocates a default-size block in every registered layer for `slot`.
  std::map<std::string, RowBlock> allocate_slot(std::size_t slot);

  /// Assigned rows for (layer, slot); LookupError if none.
  const RowBlock& assigned(const std::string& layer_id, std::size_t slot) const;
  const std::map<std::size_t, RowBlock>& assignments(const std::string& layer_id) const;
  std::size_t free_rows(const std::string& layer_id) const;

 private:
  std::size_t capacity_;
  std::map<std::string, std::size_t> rows_;
  std::map<std::string, std::map<std::size_t, RowBlock>> assigned_;
};

}  // namespace blocklora
