#include "elsa/supernet.hpp"

#include "elsa/error.hpp"

#include <algorithm>
#include <charconv>
#include <limits>
#include <set>

namespace elsa {

std::string SubnetGenome::key() const {
  std::string s;
  for (std::size_t i = 0; i < choices.size(); ++i) {
    if (i) s += '-';
    s += std::to_string(choices[i]);
  }
  return s;
}

SubnetGenome SubnetGenome::parse(std::string_view key) {
  SubnetGenome g;
  if (key.empty()) return g;
  std::size_t pos = 0;
  while (pos <= key.size()) {
    const std::size_t end = std::min(key.find_first_of("-,", pos), key.size());
    std::uint32_t v = 0;
    const auto* first = key.data() + pos;
    const auto* last = key.data() + end;
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc{} || ptr != last || first == last) {
      throw ConfigurationError("malformed genome '" + std::string(key) + "'");
    }
    g.choices.push_back(v);
    pos = end + 1;
  }
  return g;
}

std::vector<std::size_t> SupernetConfig::choice_counts() const {
  std::vector<std::size_t> counts;
  counts.reserve(genome_length());
  for (const auto& l : layers) counts.push_back(l.rank_choices.size());
  for (const auto& g : groups) counts.push_back(g.width_choices.size());
  return counts;
}

std::uint64_t SupernetConfig::space_size() const {
  std::uint64_t n = 1;
  for (std::size_t c : choice_counts()) {
    if (c != 0 && n > std::numeric_limits<std::uint64_t>::max() / c) {
      return std::numeric_limits<std::uint64_t>::max();
    }
    n *= c;
  }
  return n;
}

SubnetGenome SupernetConfig::max_genome() const {
  SubnetGenome g;
  for (std::size_t c : choice_counts()) g.choices.push_back(static_cast<std::uint32_t>(c - 1));
  return g;
}

const LayerSpace* SupernetConfig::find_layer(std::string_view layer_id) const {
  for (const auto& l : layers)
    if (l.layer_id == layer_id) return &l;
  return nullptr;
}

const WidthGroup* SupernetConfig::find_group(std::string_view tag) const {
  for (const auto& g : groups)
    if (g.tag == tag) return &g;
  return nullptr;
}

std::optional<Index> SupernetConfig::rank_for(const SubnetGenome& g, std::string_view layer_id) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].layer_id == layer_id) return layers[i].rank_choices.at(g.choices.at(i));
  }
  return std::nullopt;
}

std::optional<Index> SupernetConfig::width_for(const SubnetGenome& g, std::string_view tag) const {
  for (std::size_t i = 0; i < groups.size(); ++i) {
    if (groups[i].tag == tag) return groups[i].width_choices.at(g.choices.at(layers.size() + i));
  }
  return std::nullopt;
}

void SupernetConfig::validate() const {
  std::set<std::string> ids;
  const auto check_list = [](const std::vector<Index>& v, const std::string& where) {
    if (v.empty()) throw ConfigurationError(where + ": no choices");
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (v[i] < 1 || (i && v[i] <= v[i - 1])) {
        throw ConfigurationError(where + ": choices must be positive and strictly increasing");
      }
    }
  };
  for (const auto& l : layers) {
    if (!ids.insert(l.layer_id).second) {
      throw ConfigurationError("layer '" + l.layer_id + "' appears more than once in the supernet");
    }
    check_list(l.rank_choices, "layer '" + l.layer_id + "'");
    if (!l.width_group.empty() && !find_group(l.width_group)) {
      throw ConfigurationError("layer '" + l.layer_id + "' references unknown width group '" +
                               l.width_group + "'");
    }
  }
  std::set<std::string> tags;
  for (const auto& g : groups) {
    if (!tags.insert(g.tag).second) throw ConfigurationError("duplicate width group '" + g.tag + "'");
    check_list(g.width_choices, "width group '" + g.tag + "'");
  }
}

void SupernetConfig::check(const SubnetGenome& g) const {
  if (g.choices.size() != genome_length()) {
    throw ConfigurationError("genome has " + std::to_string(g.choices.size()) +
                             " entries, supernet expects " + std::to_string(genome_length()));
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (g.choices[i] >= layers[i].rank_choices.size()) {
      throw ConfigurationError("layer '" + layers[i].layer_id + "': rank index " +
                               std::to_string(g.choices[i]) + " out of range");
    }
  }
  for (std::size_t i = 0; i < groups.size(); ++i) {
    if (g.choices[layers.size() + i] >= groups[i].width_choices.size()) {
      throw ConfigurationError("width group '" + groups[i].tag + "': index " +
                               std::to_string(g.choices[layers.size() + i]) + " out of range");
    }
  }
}

SubnetGenome sample_genome(const SupernetConfig& cfg, RngStream& rng) {
  SubnetGenome g;
  for (std::size_t c : cfg.choice_counts()) {
    g.choices.push_back(static_cast<std::uint32_t>(rng.uniform_int(c)));
  }
  return g;
}

SubnetGenome heuristic_midpoint(const SupernetConfig& cfg) {
  SubnetGenome g;
  for (std::size_t c : cfg.choice_counts()) g.choices.push_back(static_cast<std::uint32_t>((c - 1) / 2));
  return g;
}

SubnetGenome genome_at(const SupernetConfig& cfg, std::uint64_t index) {
  SubnetGenome g;
  for (std::size_t c : cfg.choice_counts()) {
    g.choices.push_back(static_cast<std::uint32_t>(index % c));
    index /= c;
  }
  return g;
}

SubnetGenome GenomeSampler::sample(const SupernetConfig& cfg, std::size_t step, RngStream& rng) const {
  if (kind == Kind::max || step < warmup_max_steps) return cfg.max_genome();
  return sample_genome(cfg, rng);
}

}  // namespace elsa
