#include "elsa/stages.hpp"

#include "elsa/error.hpp"
#include "elsa/merge.hpp"

#include <algorithm>

namespace elsa {

std::map<std::string, CalibrationBatch> collect_calibration(const TinyTransformer& model, const Split& split,
                                                            Index sequences) {
  const Index n = std::min(sequences, split.size());
  if (n <= 0) throw ContractError("calibration: no sequences available");
  std::map<std::string, CalibrationBatch> out;
  const ActivationHook hook = [&out](const std::string& id, const Matrix& x) { out[id].x = x; };
  NoTapeScope no_tape;
  forward(model, split.range(0, n), nullptr, &hook);
  return out;
}

std::vector<LayerPruneRecord> prune_model(TinyTransformer& model, const Split& calib, const PruneSpec& spec) {
  std::map<std::string, CalibrationBatch> acts;
  if (spec.metric == PruneMetric::wanda) acts = collect_calibration(model, calib, spec.calib_sequences);
  std::vector<LayerPruneRecord> records;
  for (AdaptedLinear* layer : model.linears()) {
    const Matrix& w = layer->weight.value();
    Matrix scores;
    if (spec.metric == PruneMetric::wanda) {
      auto it = acts.find(layer->layer_id);
      if (it == acts.end()) throw ContractError("prune: no activations captured for " + layer->layer_id);
      scores = wanda_score(w, it->second);
    } else {
      scores = magnitude_score(w);
    }
    SparseWeights sw = prune(w, scores, spec.sparsity, spec.granularity);
    Matrix mask = build_mask(sw);
    if (layer->mask) mask = mask.cwiseProduct(*layer->mask);
    layer->weight.mutable_value() = sw.weights.cwiseProduct(mask);
    layer->mask = std::move(mask);
    LayerPruneRecord rec;
    rec.layer_id = layer->layer_id;
    rec.zero_fraction = zero_fraction(layer->weight.value());
    rec.total = w.size();
    rec.nonzero = static_cast<Index>((layer->weight.value().array() != 0.0).count());
    records.push_back(rec);
  }
  return records;
}

std::vector<LayerQuantRecord> quantize_model(TinyTransformer& model, int bits) {
  std::vector<LayerQuantRecord> records;
  for (AdaptedLinear* layer : model.linears()) {
    if (layer->codes) throw IncompatibleModeError("quantize: " + layer->layer_id + " already holds merged codes");
    QuantParams qp = calibrate_quantization(layer->weight.value(), bits);
    LayerQuantRecord rec;
    rec.layer_id = layer->layer_id;
    rec.bits = bits;
    rec.min_scale = *std::min_element(qp.scales.begin(), qp.scales.end());
    rec.max_scale = *std::max_element(qp.scales.begin(), qp.scales.end());
    rec.degenerate_columns = static_cast<Index>(std::count(qp.degenerate.begin(), qp.degenerate.end(), 1));
    layer->qparams = std::move(qp);
    records.push_back(rec);
  }
  return records;
}

void attach_supernet(TinyTransformer& model, const AdapterSpec& spec, bool mask_adapters, RngStream& rng) {
  attach_adapters(model, spec, rng);
  for (AdaptedLinear* layer : model.linears()) {
    layer->mask_adapter = mask_adapters && layer->adapter && layer->mask;
  }
}

}  // namespace elsa
