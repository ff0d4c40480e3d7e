#include "elsa/merge.hpp"

#include "elsa/error.hpp"
#include "elsa/rng.hpp"

#include <algorithm>

namespace elsa {

const char* to_string(MergeMode mode) {
  switch (mode) {
    case MergeMode::vanilla: return "vanilla";
    case MergeMode::sparsepeft: return "sparsepeft";
    case MergeMode::qa: return "qa";
  }
  return "?";
}

MergeMode parse_merge_mode(std::string_view s) {
  if (s == "vanilla") return MergeMode::vanilla;
  if (s == "sparsepeft") return MergeMode::sparsepeft;
  if (s == "qa") return MergeMode::qa;
  throw ConfigurationError("unknown merge mode '" + std::string(s) + "'");
}

namespace {

void require_adapter(const AdaptedLinear& layer) {
  if (!layer.adapter) throw ContractError(layer.layer_id + ": merge requires an attached adapter");
}

// Lp for merging: masked whenever the layer has a mask, whether or not the
// adapter was trained masked.
Tensor masked_delta(const AdaptedLinear& layer, const LinearActivation& act) {
  NoTapeScope no_tape;
  Tensor delta = adapter_product(*layer.adapter, act);
  if (layer.mask) delta = mask(delta, Tensor(Matrix(layer.mask->topLeftCorner(act.in, act.out)), false));
  return delta;
}

}  // namespace

Matrix merge_vanilla(const AdaptedLinear& layer, const LinearActivation& act) {
  require_adapter(layer);
  check_activation(layer, act);
  NoTapeScope no_tape;
  return layer.weight.value().topLeftCorner(act.in, act.out) + adapter_product(*layer.adapter, act).value();
}

Matrix build_mask(const Matrix& wp) { return (wp.array() != 0.0).cast<double>().matrix(); }

SparseWeights merge_sparsepeft(const AdaptedLinear& layer, const LinearActivation& act) {
  require_adapter(layer);
  check_activation(layer, act);
  if (!layer.mask) throw ContractError(layer.layer_id + ": SparsePEFT merge requires a sparsity mask");
  NoTapeScope no_tape;
  const Tensor merged = add(slice_frozen(layer, act.in, act.out), masked_delta(layer, act));
  SparseWeights out;
  out.weights = merged.value();
  out.pattern = sparsity_pattern(out.weights);
  out.sparsity_level = zero_fraction(out.weights);
  return out;
}

QuantizedWeights merge_qa_sparsepeft(const AdaptedLinear& layer, const LinearActivation& act, int bits) {
  require_adapter(layer);
  check_activation(layer, act);
  if (!layer.qparams) throw IncompatibleModeError(layer.layer_id + ": QA merge requires quantization parameters");
  if (layer.qparams->bits != bits) {
    throw IncompatibleModeError(layer.layer_id + ": QA merge at " + std::to_string(bits) +
                                " bits but layer was calibrated at " + std::to_string(layer.qparams->bits));
  }
  NoTapeScope no_tape;
  Tensor sum = slice_frozen(layer, act.in, act.out);
  sum = add(sum, masked_delta(layer, act));
  QuantizedWeights out;
  out.params = layer.qparams->leading(act.out);
  out.codes = quantize_codes(sum.value(), out.params);
  return out;
}

Tensor qa_forward(const AdaptedLinear& layer, const Tensor& x, const LinearActivation& act) {
  if (!layer.quantization_aware()) {
    throw IncompatibleModeError(layer.layer_id + ": qa_forward requires unmerged quantization parameters");
  }
  return linear_forward(layer, x, act);
}

double MergeReport::max_deviation() const {
  double m = 0.0;
  for (const auto& l : layers) m = std::max(m, l.max_deviation);
  return m;
}

MergeReport merge_model(TinyTransformer& model, MergeMode mode, std::uint64_t seed, Index probe_rows) {
  for (const auto& ls : model.space.layers) {
    if (ls.rank_choices.size() != 1 || !ls.width_group.empty()) {
      throw ContractError("merge_model: layer '" + ls.layer_id +
                          "' is still elastic; extract a subnet before merging");
    }
  }
  NoTapeScope no_tape;
  MergeReport report;
  RngStream rng(seed, streams::kProbe);
  for (AdaptedLinear* layer : model.linears()) {
    const bool quantize_only = !layer->adapter && mode == MergeMode::qa && layer->quantization_aware();
    if (!layer->adapter && !quantize_only) continue;
    const LinearActivation act = layer->full_activation();
    Matrix probe(probe_rows, act.in);
    for (Index i = 0; i < probe.rows(); ++i)
      for (Index j = 0; j < probe.cols(); ++j) probe(i, j) = rng.normal();
    const Tensor x(probe);
    const Matrix before = linear_forward(*layer, x, act).value();

    LayerMergeRecord rec;
    rec.layer_id = layer->layer_id;
    rec.mode = mode;
    rec.sparsity_before = zero_fraction(layer->weight.value());
    const SparsityPattern pattern_before = sparsity_pattern(layer->weight.value());

    switch (mode) {
      case MergeMode::vanilla: {
        if (layer->quantization_aware()) {
          throw IncompatibleModeError(layer->layer_id + ": vanilla merge of a quantization-aware layer; use qa");
        }
        layer->weight = Tensor(merge_vanilla(*layer, act), false);
        rec.precision = "f64";
        break;
      }
      case MergeMode::sparsepeft: {
        if (!layer->mask) {
          throw IncompatibleModeError(layer->layer_id + ": sparsepeft merge requires a pruned layer");
        }
        if (layer->quantization_aware()) {
          throw IncompatibleModeError(layer->layer_id + ": sparsepeft merge of a quantization-aware layer; use qa");
        }
        layer->weight = Tensor(merge_sparsepeft(*layer, act).weights, false);
        rec.precision = "f64";
        break;
      }
      case MergeMode::qa: {
        if (quantize_only) {
          layer->codes = quantize_codes(layer->weight.value(), *layer->qparams);
          layer->weight = Tensor(dequantize(*layer->codes, *layer->qparams), false);
          rec.precision = "int" + std::to_string(layer->qparams->bits);
          break;
        }
        if (!layer->qparams) {
          throw IncompatibleModeError(layer->layer_id + ": qa merge requires quantization parameters");
        }
        QuantizedWeights qw = merge_qa_sparsepeft(*layer, act, layer->qparams->bits);
        layer->weight = Tensor(dequantize(qw), false);
        layer->codes = std::move(qw.codes);
        rec.precision = "int" + std::to_string(layer->qparams->bits);
        break;
      }
    }
    layer->adapter.reset();
    layer->mask_adapter = false;

    const Matrix after = linear_forward(*layer, x, act).value();
    rec.max_deviation = (after - before).cwiseAbs().maxCoeff();
    rec.sparsity_after = zero_fraction(layer->weight.value());
    if (mode != MergeMode::vanilla && layer->mask) {
      rec.pattern_preserved = pattern_subset(sparsity_pattern(layer->weight.value()), pattern_before);
      if (!rec.pattern_preserved) {
        throw ContractError(layer->layer_id + ": merged weights leave the pruned sparsity pattern");
      }
    }
    report.layers.push_back(std::move(rec));
  }
  model.space = derive_supernet(model);
  return report;
}

}  // namespace elsa
