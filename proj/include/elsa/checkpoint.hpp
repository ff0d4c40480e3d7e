#pragma once

#include "elsa/metrics.hpp"
#include "elsa/transformer.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace elsa {

// File layout: "ELSA1\n", u64 little-endian manifest length, JSON manifest,
// then the tensor blob. Every tensor record in the manifest names a byte
// range of the blob; all numbers are little-endian.

struct TensorRecord {
  std::string name;
  /// "f64", "u8" or "u16".
  std::string dtype;
  Shape shape;
  std::uint64_t offset = 0;
  std::uint64_t nbytes = 0;
  /// "frozen", "adapter", "qcodes", "qscale", "qzero" or "mask".
  std::string role;
};

/// Parsed but not yet materialized checkpoint.
struct Checkpoint {
  nlohmann::json manifest;
  std::vector<TensorRecord> records;
  std::vector<std::uint8_t> blob;

  /// Parses and validates the container: magic, lengths, record bounds,
  /// unique names. Throws ArtifactError.
  static Checkpoint parse(std::span<const std::uint8_t> bytes);
  /// Element values of a record widened to double.
  Matrix tensor(const TensorRecord& rec) const;
  const TensorRecord& find(std::string_view name) const;
  /// nullptr when absent.
  const TensorRecord* lookup(std::string_view name) const;
};

struct Artifact {
  TinyTransformer model;
  /// Caller-owned section: compression metadata, lineage, stage results.
  nlohmann::json metadata;
};

std::vector<std::uint8_t> serialize_checkpoint(const TinyTransformer& model, const nlohmann::json& metadata);
Artifact deserialize_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const TinyTransformer& model,
                     const nlohmann::json& metadata);
Artifact load_checkpoint(const std::filesystem::path& path);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

/// Counts over records with role frozen, adapter or qcodes (a merged
/// quantized weight is stored only as codes). A code equal to its column's
/// zero point decodes to 0 and is not counted as nonzero.
ParamCount count_params(const Checkpoint& ckpt);

}  // namespace elsa
