#include "elsa/extract.hpp"

#include "elsa/error.hpp"

namespace elsa {

namespace {

AdaptedLinear slice_layer(const AdaptedLinear& src, const LinearActivation& act) {
  AdaptedLinear dst;
  dst.layer_id = src.layer_id;
  dst.weight = Tensor(Matrix(src.weight.value().topLeftCorner(act.in, act.out)), false);
  if (src.adapter) {
    const ElasticAdapter& a = *src.adapter;
    ElasticAdapter b;
    b.l1 = Tensor(Matrix(a.l1.value().topLeftCorner(act.in, act.rank)), true);
    b.l2 = Tensor(Matrix(a.l2.value().topLeftCorner(act.rank, act.out)), true);
    b.scale = a.scale;
    b.alpha = a.scale * static_cast<double>(act.rank);
    b.rank_choices = {act.rank};
    b.mode = ElasticMode::A;
    dst.adapter = std::move(b);
  }
  if (src.mask) dst.mask = Matrix(src.mask->topLeftCorner(act.in, act.out));
  dst.mask_adapter = src.mask_adapter;
  if (src.qparams) dst.qparams = src.qparams->leading(act.out);
  if (src.codes) dst.codes = CodeMatrix(src.codes->topLeftCorner(act.in, act.out));
  return dst;
}

}  // namespace

TinyTransformer extract_subnet(const TinyTransformer& model, const SubnetGenome& genome) {
  const ModelActivation act = resolve_activation(model, &genome);
  TinyTransformer out = model.clone();
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    const Block& src = model.blocks[i];
    const BlockActivation& ba = act.blocks[i];
    Block& dst = out.blocks[i];
    dst.heads = ba.heads;
    dst.mlp = ba.mlp;
    dst.q = slice_layer(src.q, ba.q);
    dst.k = slice_layer(src.k, ba.k);
    dst.v = slice_layer(src.v, ba.v);
    dst.o = slice_layer(src.o, ba.o);
    dst.up = slice_layer(src.up, ba.up);
    dst.down = slice_layer(src.down, ba.down);
  }
  out.space = derive_supernet(out);
  return out;
}

TinyTransformer make_static(const TinyTransformer& model) {
  TinyTransformer out = model.clone();
  for (auto* l : out.linears()) {
    if (!l->adapter) continue;
    l->adapter->rank_choices = {l->adapter->max_rank()};
    l->adapter->in_choices.clear();
    l->adapter->out_choices.clear();
    l->adapter->mode = ElasticMode::A;
  }
  out.space = derive_supernet(out);
  return out;
}

}  // namespace elsa
