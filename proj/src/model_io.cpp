#include "blocklora/model_io.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <vector>

#include <json.hpp>

#include "blocklora/errors.hpp"

namespace blocklora {

namespace {

using nlohmann::ordered_json;

constexpr char kMagic[4] = {'B', 'L', 'T', '1'};
constexpr std::size_t kPreambleBytes = 4 + 8;

struct NamedTensor {
  std::string name;
  const Matrix* matrix;
};

ordered_json row_blocks_json(const std::map<std::string, RowBlock>& blocks) {
  ordered_json out = ordered_json::object();
  for (const auto& [id, rows] : blocks) out[id] = rows;
  return out;
}

void append_f32(std::string& out, double value) {
  const float f = static_cast<float>(value);
  if (!std::isfinite(f)) throw DomainError("value " + std::to_string(value) + " overflows f32");
  const std::uint32_t bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFFu));
}

// Fills header["tensors"] and returns the full container bytes.
std::string pack(ordered_json header, const std::vector<NamedTensor>& tensors) {
  ordered_json table = ordered_json::array();
  std::string payload;
  for (const auto& t : tensors) {
    const std::size_t offset = payload.size();
    for (double v : t.matrix->data()) append_f32(payload, v);
    table.push_back({{"name", t.name},
                     {"shape", {t.matrix->rows(), t.matrix->cols()}},
                     {"dtype", "f32"},
                     {"byte_offset", offset},
                     {"byte_length", payload.size() - offset}});
  }
  header["tensors"] = std::move(table);
  const std::string text = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  const std::uint64_t length = text.size();
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((length >> (8 * i)) & 0xFFu));
  out += text;
  out += payload;
  return out;
}

struct Container {
  ordered_json header;
  std::map<std::string, Matrix> tensors;
};

std::uint64_t read_u64_le(const std::string& bytes, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[at + i])) << (8 * i);
  }
  return v;
}

float read_f32_le(const std::string& bytes, std::size_t at) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) {
    bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[at + i])) << (8 * i);
  }
  return std::bit_cast<float>(bits);
}

Container unpack(const std::string& bytes, const std::string& expected_type) {
  if (bytes.size() < sizeof(kMagic) || bytes.compare(0, sizeof(kMagic), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("not a .blt container: bad magic bytes");
  }
  if (bytes.size() < kPreambleBytes) throw CorruptionError("truncated .blt preamble");
  const std::uint64_t header_length = read_u64_le(bytes, 4);
  if (header_length > bytes.size() - kPreambleBytes) {
    throw CorruptionError("header length " + std::to_string(header_length) +
                          " runs past end of file");
  }
  const std::size_t payload_start = kPreambleBytes + header_length;
  const std::size_t payload_size = bytes.size() - payload_start;

  Container c;
  try {
    c.header = ordered_json::parse(bytes.begin() + kPreambleBytes, bytes.begin() + payload_start);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("header is not valid JSON: ") + e.what());
  }

  try {
    if (!c.header.is_object()) throw FormatError("header must be a JSON object");
    const int version = c.header.at("format_version").get<int>();
    if (version != kFormatVersion) {
      throw FormatError("unsupported format_version " + std::to_string(version));
    }
    const std::string type = c.header.at("type").get<std::string>();
    if (type != expected_type) {
      throw FormatError("container holds a '" + type + "', expected '" + expected_type + "'");
    }

    std::uint64_t previous_end = 0;
    for (const auto& entry : c.header.at("tensors")) {
      const std::string name = entry.at("name").get<std::string>();
      if (entry.at("dtype").get<std::string>() != "f32") {
        throw FormatError("tensor '" + name + "' has unsupported dtype");
      }
      const auto& shape = entry.at("shape");
      if (shape.size() != 2) throw FormatError("tensor '" + name + "' is not 2-D");
      const std::uint64_t rows = shape[0].get<std::uint64_t>();
      const std::uint64_t cols = shape[1].get<std::uint64_t>();
      const std::uint64_t offset = entry.at("byte_offset").get<std::uint64_t>();
      const std::uint64_t length = entry.at("byte_length").get<std::uint64_t>();
      if (rows == 0 || cols == 0 || rows > std::numeric_limits<std::uint32_t>::max() ||
          cols > std::numeric_limits<std::uint32_t>::max() || length != rows * cols * 4) {
        throw CorruptionError("tensor '" + name + "' byte_length does not match its shape");
      }
      if (offset < previous_end) {
        throw CorruptionError("tensor '" + name + "' overlaps or precedes the previous tensor");
      }
      if (offset > payload_size || length > payload_size - offset) {
        throw CorruptionError("tensor '" + name + "' extends past the end of the payload (" +
                              std::to_string(payload_size) + " bytes)");
      }
      previous_end = offset + length;

      std::vector<double> data(rows * cols);
      for (std::size_t i = 0; i < data.size(); ++i) {
        data[i] = static_cast<double>(read_f32_le(bytes, payload_start + offset + 4 * i));
        if (!std::isfinite(data[i])) {
          throw IntegrityError("tensor '" + name + "' contains a non-finite value");
        }
      }
      if (!c.tensors.emplace(name, Matrix(rows, cols, std::move(data))).second) {
        throw FormatError("duplicate tensor name '" + name + "'");
      }
    }
    if (previous_end != payload_size) {
      throw CorruptionError("payload has " + std::to_string(payload_size - previous_end) +
                            " unaccounted trailing bytes");
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed header: ") + e.what());
  }
  return c;
}

Matrix take(Container& c, const std::string& name) {
  auto it = c.tensors.find(name);
  if (it == c.tensors.end()) throw FormatError("missing tensor '" + name + "'");
  Matrix m = std::move(it->second);
  c.tensors.erase(it);
  return m;
}

std::map<std::string, RowBlock> parse_row_blocks(const ordered_json& j) {
  std::map<std::string, RowBlock> blocks;
  for (const auto& [id, rows] : j.items()) blocks.emplace(id, rows.get<RowBlock>());
  return blocks;
}

std::string lora_b_name(const std::string& id) { return id + ".lora_B"; }
std::string lora_a_name(const std::string& id) { return id + ".lora_A"; }

}  // namespace

std::string encode_adapter(const LoRAAdapter& adapter) {
  ordered_json header;
  header["format_version"] = kFormatVersion;
  header["type"] = "adapter";
  header["concept_name"] = adapter.concept_name;
  header["erasure_rate"] = adapter.erasure_rate;
  header["training_seed"] = adapter.training_seed;
  header["final_train_mse"] = adapter.final_train_mse;
  header["tensors"] = ordered_json::array();
  std::map<std::string, RowBlock> blocks;
  std::vector<std::string> names;
  std::vector<NamedTensor> tensors;
  for (const auto& [id, layer] : adapter.layers) {
    blocks.emplace(id, layer.row_block);
    tensors.push_back({lora_b_name(id), &layer.b});
    tensors.push_back({lora_a_name(id), &layer.a});
  }
  header["row_blocks"] = row_blocks_json(blocks);
  header["base_signature"] = adapter.base_signature;
  return pack(std::move(header), tensors);
}

LoRAAdapter decode_adapter(const std::string& bytes) {
  Container c = unpack(bytes, "adapter");
  LoRAAdapter adapter;
  try {
    adapter.concept_name = c.header.at("concept_name").get<std::string>();
    adapter.erasure_rate = c.header.at("erasure_rate").get<double>();
    adapter.training_seed = c.header.at("training_seed").get<std::uint64_t>();
    adapter.final_train_mse = c.header.at("final_train_mse").get<double>();
    adapter.base_signature = c.header.at("base_signature").get<std::string>();
    for (auto& [id, rows] : parse_row_blocks(c.header.at("row_blocks"))) {
      LoRALayer layer{id, take(c, lora_b_name(id)), take(c, lora_a_name(id)), std::move(rows)};
      adapter.layers.emplace(id, std::move(layer));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed adapter header: ") + e.what());
  }
  if (!c.tensors.empty()) {
    throw FormatError("tensor '" + c.tensors.begin()->first + "' has no matching row block");
  }
  try {
    adapter.validate();
  } catch (const DomainError& e) {
    throw IntegrityError(e.what());
  }
  return adapter;
}

std::string encode_merged(const MergedModel& merged) {
  ordered_json header;
  header["format_version"] = kFormatVersion;
  header["type"] = "merged";
  header["base_signature"] = merged.base_signature;
  ordered_json provenance = ordered_json::array();
  for (const auto& p : merged.provenance) {
    provenance.push_back({{"concept_name", p.concept_name},
                          {"alpha", p.alpha},
                          {"row_blocks", row_blocks_json(p.row_blocks)}});
  }
  header["provenance"] = std::move(provenance);
  header["tensors"] = ordered_json::array();
  std::vector<NamedTensor> tensors;
  for (const auto& [id, residual] : merged.layers) tensors.push_back({id, &residual});
  return pack(std::move(header), tensors);
}

MergedModel decode_merged(const std::string& bytes) {
  Container c = unpack(bytes, "merged");
  MergedModel merged;
  try {
    merged.base_signature = c.header.at("base_signature").get<std::string>();
    for (const auto& p : c.header.at("provenance")) {
      merged.provenance.push_back({p.at("concept_name").get<std::string>(),
                                   p.at("alpha").get<double>(),
                                   parse_row_blocks(p.at("row_blocks"))});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed merged header: ") + e.what());
  }
  for (auto& [name, m] : c.tensors) merged.layers.emplace(name, std::move(m));
  return merged;
}

std::string encode_base(const BaseModel& base) {
  ordered_json header;
  header["format_version"] = kFormatVersion;
  header["type"] = "base";
  header["signature"] = base.signature();
  header["tensors"] = ordered_json::array();
  return pack(std::move(header), {{"fc1.weight", &base.w1},
                                  {"fc1.bias", &base.b1},
                                  {"fc2.weight", &base.w2},
                                  {"fc2.bias", &base.b2}});
}

BaseModel decode_base(const std::string& bytes) {
  Container c = unpack(bytes, "base");
  BaseModel base{take(c, "fc1.weight"), take(c, "fc1.bias"), take(c, "fc2.weight"),
                 take(c, "fc2.bias")};
  try {
    base.validate();
  } catch (const ShapeError& e) {
    throw IntegrityError(e.what());
  }
  std::string recorded;
  try {
    recorded = c.header.at("signature").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed base header: ") + e.what());
  }
  if (recorded != base.signature()) {
    throw IntegrityError("base model signature " + recorded + " does not match its weights (" +
                         base.signature() + ")");
  }
  return base;
}

std::string allocation_to_json(const BlockAllocation& allocation) {
  ordered_json doc;
  doc["format_version"] = kFormatVersion;
  doc["type"] = "allocation";
  doc["capacity"] = allocation.capacity();
  ordered_json layers = ordered_json::object();
  for (const auto& [id, rows] : allocation.layers()) {
    ordered_json assigned = ordered_json::object();
    for (const auto& [slot, block] : allocation.assignments(id)) {
      assigned[std::to_string(slot)] = block;
    }
    layers[id] = {{"rows", rows}, {"assigned", std::move(assigned)}};
  }
  doc["layers"] = std::move(layers);
  return doc.dump(2);
}

BlockAllocation allocation_from_json(const std::string& text) {
  try {
    const auto doc = ordered_json::parse(text);
    if (doc.at("type").get<std::string>() != "allocation") {
      throw FormatError("document is not an allocation");
    }
    BlockAllocation allocation(doc.at("capacity").get<std::size_t>());
    for (const auto& [id, layer] : doc.at("layers").items()) {
      allocation.add_layer(id, layer.at("rows").get<std::size_t>());
      for (const auto& [slot, rows] : layer.at("assigned").items()) {
        allocation.assign_block(std::stoull(slot), id, rows.get<RowBlock>());
      }
    }
    return allocation;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed allocation: ") + e.what());
  } catch (const std::logic_error& e) {
    throw FormatError(std::string("malformed allocation slot: ") + e.what());
  }
}

std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("failed reading '" + path.string() + "'");
  return bytes;
}

void write_file_bytes(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

void write_adapter(const LoRAAdapter& adapter, const std::filesystem::path& path) {
  write_file_bytes(path, encode_adapter(adapter));
}

LoRAAdapter read_adapter(const std::filesystem::path& path) {
  return decode_adapter(read_file_bytes(path));
}

void write_merged(const MergedModel& merged, const std::filesystem::path& path) {
  write_file_bytes(path, encode_merged(merged));
}

MergedModel read_merged(const std::filesystem::path& path) {
  return decode_merged(read_file_bytes(path));
}

void write_base(const BaseModel& base, const std::filesystem::path& path) {
  write_file_bytes(path, encode_base(base));
}

BaseModel read_base(const std::filesystem::path& path) { return decode_base(read_file_bytes(path)); }

}  // namespace blocklora
