#pragma once

#include <filesystem>
#include <string>

#include "blocklora/adapter.hpp"
#include "blocklora/base_model.hpp"
#include "blocklora/block_allocation.hpp"
#include "blocklora/merge.hpp"

namespace blocklora {

// .blt container, documented byte for byte in docs/file_format.md:
//
//   "BLT1" | u64 LE header length | UTF-8 JSON header | payload
//
// The payload is the concatenation of row-major little-endian f32 tensors
// described by header["tensors"]. header["type"] distinguishes adapters,
// merged models and base models. In-memory values are f64; writers round
// to nearest-even f32.

inline constexpr int kFormatVersion = 1;

std::string encode_adapter(const LoRAAdapter& adapter);
LoRAAdapter decode_adapter(const std::string& bytes);
void write_adapter(const LoRAAdapter& adapter, const std::filesystem::path& path);
LoRAAdapter read_adapter(const std::filesystem::path& path);

std::string encode_merged(const MergedModel& merged);
MergedModel decode_merged(const std::string& bytes);
void write_merged(const MergedModel& merged, const std::filesystem::path& path);
MergedModel read_merged(const std::filesystem::path& path);

std::string encode_base(const BaseModel& base);
BaseModel decode_base(const std::string& bytes);
void write_base(const BaseModel& base, const std::filesystem::path& path);
BaseModel read_base(const std::filesystem::path& path);

/// Allocations are small and stored as plain JSON.
std::string allocation_to_json(const BlockAllocation& allocation);
BlockAllocation allocation_from_json(const std::string& text);

std::string read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::string& bytes);

}  // namespace blocklora
