#pragma once

#include "elsa/rng.hpp"
#include "elsa/tensor.hpp"

#include <string>
#include <string_view>
#include <vector>

namespace elsa {

/// Mode A: only the rank is elastic. Mode B: rank plus input/output channels.
enum class ElasticMode { A, B };

const char* to_string(ElasticMode mode);
ElasticMode parse_elastic_mode(std::string_view s);

/// Sizes activated for one linear layer: adapter rank and the leading
/// input/output channel counts.
struct LinearActivation {
  Index rank = 0;
  Index in = 0;
  Index out = 0;
  bool operator==(const LinearActivation&) const = default;
};

/// LoRA factors L1 [m × r_max] and L2 [r_max × n] with elastic slicing.
/// Every sub-configuration uses the leading rows/columns of the same storage.
struct ElasticAdapter {
  Tensor l1;
  Tensor l2;
  double alpha = 1.0;
  /// alpha / r_max, fixed for every activated rank.
  double scale = 1.0;
  std::vector<Index> rank_choices;
  std::vector<Index> in_choices;
  std::vector<Index> out_choices;
  ElasticMode mode = ElasticMode::A;

  /// L1 ~ N(0, 0.02²), L2 = 0, so a fresh adapter contributes nothing.
  static ElasticAdapter create(Index in_features, Index out_features, std::vector<Index> rank_choices,
                               double alpha, RngStream& rng, ElasticMode mode = ElasticMode::A,
                               std::vector<Index> in_choices = {},
                               std::vector<Index> out_choices = {});

  Index in_features() const { return l1.rows(); }
  Index out_features() const { return l2.cols(); }
  Index max_rank() const { return l1.cols(); }
  LinearActivation full() const { return {max_rank(), in_features(), out_features()}; }

  ElasticAdapter clone() const;
};

/// Throws ConfigurationError (prefixed with `where`) unless `act` is one of the
/// adapter's declared sub-configurations.
void check_activation(const ElasticAdapter& ad, const LinearActivation& act, std::string_view where);

/// s · X · L1[:in, :rank] · L2[:rank, :out].
Tensor adapter_forward(const ElasticAdapter& ad, const Tensor& x, const LinearActivation& act);

/// Dense product s · L1[:in, :rank] · L2[:rank, :out] as a differentiable tensor.
Tensor adapter_product(const ElasticAdapter& ad, const LinearActivation& act);

}  // namespace elsa
