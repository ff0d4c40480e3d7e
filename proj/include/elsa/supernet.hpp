#pragma once

#include "elsa/rng.hpp"
#include "elsa/tensor.hpp"

#include <compare>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace elsa {

/// Search-space entry for one adapter-bearing layer.
struct LayerSpace {
  std::string layer_id;
  std::vector<Index> rank_choices;
  /// Tag of the width group that slices this layer's channels; empty in Mode A.
  std::string width_group;
};

/// Layers whose channel slicing must agree (e.g. MLP up-out and down-in).
/// Choices are channel counts.
struct WidthGroup {
  std::string tag;
  std::vector<Index> width_choices;
};

/// One choice index per elastic dimension: layer ranks first, then groups.
struct SubnetGenome {
  std::vector<std::uint32_t> choices;

  auto operator<=>(const SubnetGenome&) const = default;
  bool operator==(const SubnetGenome&) const = default;

  /// "0-2-1" style key, stable across runs.
  std::string key() const;
  static SubnetGenome parse(std::string_view key);
};

struct SupernetConfig {
  std::vector<LayerSpace> layers;
  std::vector<WidthGroup> groups;

  std::size_t genome_length() const { return layers.size() + groups.size(); }
  std::vector<std::size_t> choice_counts() const;
  /// Number of distinct genomes, saturating at UINT64_MAX.
  std::uint64_t space_size() const;

  SubnetGenome max_genome() const;

  const LayerSpace* find_layer(std::string_view layer_id) const;
  const WidthGroup* find_group(std::string_view tag) const;

  /// Rank chosen for `layer_id`, or nullopt if the layer is not in the space.
  std::optional<Index> rank_for(const SubnetGenome& g, std::string_view layer_id) const;
  /// Width chosen for group `tag`, or nullopt if no such group.
  std::optional<Index> width_for(const SubnetGenome& g, std::string_view tag) const;

  /// Structural checks: unique layer ids, sorted positive choices, groups referenced exist.
  void validate() const;
  /// Throws ConfigurationError naming the first offending dimension.
  void check(const SubnetGenome& g) const;
};

/// Uniform independent choice per elastic dimension.
SubnetGenome sample_genome(const SupernetConfig& cfg, RngStream& rng);

/// Index floor((c-1)/2) in every dimension: the lower median for even counts.
SubnetGenome heuristic_midpoint(const SupernetConfig& cfg);

/// Decodes the i-th genome in mixed-radix order (first dimension fastest).
SubnetGenome genome_at(const SupernetConfig& cfg, std::uint64_t index);

/// Per-step sub-configuration schedule for supernet training.
struct GenomeSampler {
  enum class Kind { max, uniform };
  Kind kind = Kind::uniform;
  /// Steps at the start of training that always use the max genome.
  std::size_t warmup_max_steps = 0;

  SubnetGenome sample(const SupernetConfig& cfg, std::size_t step, RngStream& rng) const;
};

}  // namespace elsa
