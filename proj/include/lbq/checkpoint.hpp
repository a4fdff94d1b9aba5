#pragma once
// Binary checkpoint container. Little-endian throughout.
//
//   header  "LBQ1" | u32 version | u32 record count
//   record  u32 type | u32 path length | path bytes | u32 rank | u64 dims[rank]
//           | u32 group_size | u64 payload length | payload | u32 CRC-32
//
// The CRC covers every byte of the record before it.

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lbq/model.hpp"

namespace lbq {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class RecordType : std::uint32_t {
  FpWeights = 1,
  RelaxedQuant = 2,
  PackedQuant = 3,
  ActParams = 4,
  Config = 5,
};

struct Record {
  RecordType type = RecordType::FpWeights;
  std::string path;
  std::vector<std::uint64_t> dims;
  std::uint32_t group_size = 0;
  std::vector<std::uint8_t> payload;
};

std::vector<std::uint8_t> serialize_records(const std::vector<Record>& records);
/// FormatError on bad magic, version, truncation or checksum.
std::vector<Record> parse_records(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, std::span<const std::uint8_t> bytes);

/// Ordered key/value metadata stored in the config record.
using Meta = std::vector<std::pair<std::string, std::string>>;
std::string meta_get(const Meta& meta, const std::string& key, const std::string& fallback = "");

struct Checkpoint {
  Model model;
  Meta meta;
  std::string stage() const { return meta_get(meta, "stage"); }
};

std::vector<Record> model_records(const Model& model, const Meta& meta);
Checkpoint model_from_records(const std::vector<Record>& records);

void save_checkpoint(const Model& model, const Meta& meta, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace lbq
