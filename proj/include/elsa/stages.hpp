#pragma once

#include "elsa/compress.hpp"
#include "elsa/task.hpp"
#include "elsa/transformer.hpp"

#include <map>
#include <string>
#include <vector>

namespace elsa {

struct PruneSpec {
  PruneMetric metric = PruneMetric::wanda;
  double sparsity = 0.5;
  Granularity granularity = Granularity::per_output;
  /// Leading training sequences used to collect activations.
  Index calib_sequences = 128;
};

struct LayerPruneRecord {
  std::string layer_id;
  double zero_fraction = 0.0;
  Index nonzero = 0;
  Index total = 0;
};

/// Input activations of every block linear for the first `sequences` rows of
/// `split`, from one forward pass of the current (max-genome) model.
std::map<std::string, CalibrationBatch> collect_calibration(const TinyTransformer& model, const Split& split,
                                                            Index sequences);

/// Prunes every block linear in place and stores its 0/1 mask. All layers are
/// scored against activations of the unpruned model.
std::vector<LayerPruneRecord> prune_model(TinyTransformer& model, const Split& calib, const PruneSpec& spec);

struct LayerQuantRecord {
  std::string layer_id;
  int bits = 0;
  double min_scale = 0.0;
  double max_scale = 0.0;
  Index degenerate_columns = 0;
};

/// Calibrates per-column quantization parameters on every block linear's
/// current weight. The layers then run the quantization-aware forward.
std::vector<LayerQuantRecord> quantize_model(TinyTransformer& model, int bits);

/// Attaches adapters and sets SparsePEFT masking on pruned layers when
/// `mask_adapters` is true.
void attach_supernet(TinyTransformer& model, const AdapterSpec& spec, bool mask_adapters, RngStream& rng);

}  // namespace elsa
