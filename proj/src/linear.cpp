#include "elsa/linear.hpp"

#include "elsa/error.hpp"

namespace elsa {

AdaptedLinear AdaptedLinear::create(std::string layer_id, Matrix w) {
  AdaptedLinear l;
  l.layer_id = std::move(layer_id);
  l.weight = Tensor(std::move(w), false);
  return l;
}

LinearActivation AdaptedLinear::full_activation() const {
  return {adapter ? adapter->max_rank() : 0, in_features(), out_features()};
}

AdaptedLinear AdaptedLinear::clone() const {
  AdaptedLinear c = *this;
  c.weight = weight.clone();
  if (adapter) c.adapter = adapter->clone();
  return c;
}

void check_activation(const AdaptedLinear& layer, const LinearActivation& act) {
  if (act.in < 1 || act.in > layer.in_features() || act.out < 1 || act.out > layer.out_features()) {
    throw ConfigurationError(layer.layer_id + ": activation " + std::to_string(act.in) + "x" +
                             std::to_string(act.out) + " outside weight [" +
                             std::to_string(layer.in_features()) + "x" +
                             std::to_string(layer.out_features()) + "]");
  }
  if (layer.adapter) check_activation(*layer.adapter, act, layer.layer_id);
}

Tensor slice_frozen(const AdaptedLinear& layer, Index in, Index out) {
  return leading_block(layer.weight, in, out);
}

Tensor adapter_delta(const AdaptedLinear& layer, const LinearActivation& act) {
  if (!layer.adapter) throw ContractError(layer.layer_id + ": no adapter attached");
  Tensor delta = adapter_product(*layer.adapter, act);
  if (layer.mask_adapter && !layer.mask) {
    throw ContractError(layer.layer_id + ": adapter masking requested without a mask");
  }
  if (masks_adapter(layer)) {
    delta = mask(delta, Tensor(Matrix(layer.mask->topLeftCorner(act.in, act.out)), false));
  }
  return delta;
}

Tensor effective_weight(const AdaptedLinear& layer, const LinearActivation& act) {
  Tensor w = slice_frozen(layer, act.in, act.out);
  if (layer.adapter) w = add(w, adapter_delta(layer, act));
  return w;
}

Tensor linear_forward(const AdaptedLinear& layer, const Tensor& x, const LinearActivation& act) {
  check_activation(layer, act);
  if (layer.quantization_aware()) {
    return matmul(x, fake_quantize(effective_weight(layer, act), layer.qparams->leading(act.out)));
  }
  Tensor y = matmul_leading(x, layer.weight, act.in, act.out);
  if (!layer.adapter) return y;
  if (masks_adapter(layer)) return add(y, matmul(x, adapter_delta(layer, act)));
  return add(y, adapter_forward(*layer.adapter, x, act));
}

}  // namespace elsa
