#pragma once

#include "elsa/compress.hpp"
#include "elsa/merge.hpp"
#include "elsa/search.hpp"
#include "elsa/supernet.hpp"
#include "elsa/task.hpp"
#include "elsa/training.hpp"
#include "elsa/transformer.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>

namespace elsa {

/// Published JSON Schema for run configurations.
const nlohmann::json& run_config_schema();

/// Checks `doc` against the subset of JSON Schema used by the run config
/// schema (type, enum, properties, additionalProperties, minimum/maximum,
/// exclusive bounds, items, minItems, uniqueItems). Throws SchemaError with a
/// JSON pointer to the first violation.
void validate_schema(const nlohmann::json& doc, const nlohmann::json& schema);

struct StageSettings {
  std::size_t latency_repeats = 7;
  GenomeSampler sampler;
  /// "nls" (rank-only) or "lonas" (rank and channel widths).
  std::string supernet_mode = "nls";
  MergeMode merge_mode = MergeMode::sparsepeft;
};

struct CompressionSettings {
  PruneMetric metric = PruneMetric::wanda;
  double sparsity = 0.5;
  Granularity granularity = Granularity::per_output;
  int bits = 4;
  Index calib_sequences = 128;
};

struct RunConfig {
  std::uint64_t seed = 0;
  ModelDims model;
  TaskSpec task;
  TrainConfig pretrain;
  AdapterSpec supernet;
  TrainConfig train;
  CompressionSettings compression;
  SearchConfig search;
  StageSettings stages;

  /// Fully defaulted configuration as JSON; the basis of `hash()`.
  nlohmann::json effective() const;
  /// FNV-1a 64 of the compact effective configuration, as 16 hex digits.
  std::string hash() const;
};

/// Validates against the schema, then fills defaults.
RunConfig parse_run_config(const nlohmann::json& doc);
/// Reads a JSON file and applies the ELSA_SEED environment override.
RunConfig load_run_config(const std::filesystem::path& path);

std::string fnv1a_hex(std::string_view text);

}  // namespace elsa
