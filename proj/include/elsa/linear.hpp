#pragma once

#include "elsa/adapter.hpp"
#include "elsa/compress.hpp"
#include "elsa/tensor.hpp"

#include <optional>
#include <string>

namespace elsa {

/// Frozen linear map Y = X·W with an optional elastic adapter.
///
/// Compression state rides along with the layer:
///  - `mask`: 0/1 sparsity mask of a pruned W. With `mask_adapter` set the
///    adapter product is masked in every forward (SparsePEFT).
///  - `qparams`: scales/zeros calibrated on W before fine-tuning. While set
///    (and no codes exist) the forward quantizes W + adapter on the fly.
///  - `codes`: integer storage after a quantization-aware merge; `weight`
///    then holds dequant(codes).
struct AdaptedLinear {
  std::string layer_id;
  Tensor weight;
  std::optional<ElasticAdapter> adapter;
  std::optional<Matrix> mask;
  bool mask_adapter = false;
  std::optional<QuantParams> qparams;
  std::optional<CodeMatrix> codes;

  static AdaptedLinear create(std::string layer_id, Matrix w);

  Index in_features() const { return weight.rows(); }
  Index out_features() const { return weight.cols(); }
  LinearActivation full_activation() const;
  bool quantization_aware() const { return qparams.has_value() && !codes.has_value(); }

  /// Deep copy: no storage shared with the source.
  AdaptedLinear clone() const;
};

/// True when the adapter product is masked in the forward: SparsePEFT layers,
/// and every pruned layer on the quantization-aware path.
inline bool masks_adapter(const AdaptedLinear& layer) {
  return layer.mask.has_value() && (layer.mask_adapter || layer.quantization_aware());
}

/// Validates `act` against the layer and its adapter; errors name the layer.
void check_activation(const AdaptedLinear& layer, const LinearActivation& act);

/// Leading W[:in, :out] slice used under a width activation.
Tensor slice_frozen(const AdaptedLinear& layer, Index in, Index out);

/// Effective dense weight W_eff such that the layer computes X·W_eff under
/// `act` (before any on-the-fly quantization).
Tensor effective_weight(const AdaptedLinear& layer, const LinearActivation& act);

/// Masked, scaled adapter product Lᵖ for `act` (unmasked when the layer does
/// not mask its adapter).
Tensor adapter_delta(const AdaptedLinear& layer, const LinearActivation& act);

Tensor linear_forward(const AdaptedLinear& layer, const Tensor& x, const LinearActivation& act);

}  // namespace elsa
