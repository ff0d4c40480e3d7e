#pragma once

#include "elsa/compress.hpp"
#include "elsa/linear.hpp"
#include "elsa/transformer.hpp"

#include <string>
#include <string_view>
#include <vector>

namespace elsa {

enum class MergeMode { vanilla, sparsepeft, qa };
const char* to_string(MergeMode mode);
MergeMode parse_merge_mode(std::string_view s);

/// W' = W[:in, :out] + s·L1·L2 at the given activation. Sparsity of W is lost.
Matrix merge_vanilla(const AdaptedLinear& layer, const LinearActivation& act);

/// M[i, j] = 1 iff Wp[i, j] != 0.
Matrix build_mask(const Matrix& wp);
inline Matrix build_mask(const SparseWeights& wp) { return build_mask(wp.weights); }

/// Wp + Lp with Lp = s·(L1·L2) ⊙ M. Requires the layer's mask.
SparseWeights merge_sparsepeft(const AdaptedLinear& layer, const LinearActivation& act);

/// clamp(round((Wp + Lp)/s) + z, 0, 2^n - 1) with the layer's frozen scales
/// and zeros. `bits` must match the stored parameters.
QuantizedWeights merge_qa_sparsepeft(const AdaptedLinear& layer, const LinearActivation& act, int bits);

/// Quantization-aware forward: X · dequant(Eq-3 codes of Wp + Lp), with a
/// straight-through gradient into the adapter.
Tensor qa_forward(const AdaptedLinear& layer, const Tensor& x, const LinearActivation& act);

struct LayerMergeRecord {
  std::string layer_id;
  MergeMode mode = MergeMode::vanilla;
  double max_deviation = 0.0;
  double sparsity_before = 0.0;
  double sparsity_after = 0.0;
  /// "f64" or "int<bits>".
  std::string precision;
  bool pattern_preserved = true;
};

struct MergeReport {
  std::vector<LayerMergeRecord> layers;
  double max_deviation() const;
};

/// Folds every adapter of a static model (single-choice space, e.g. from
/// extract_subnet) into its base weights and drops the adapters. Deviations
/// are measured on `probe_rows` random inputs per layer. SparsePEFT and QA
/// merges assert that no pruned position becomes nonzero. A QA merge also
/// converts quantization-aware layers without adapters to integer codes.
MergeReport merge_model(TinyTransformer& model, MergeMode mode, std::uint64_t seed,
                        Index probe_rows = 16);

}  // namespace elsa
