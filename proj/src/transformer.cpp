#include "elsa/transformer.hpp"

#include "elsa/error.hpp"

#include <algorithm>
#include <cmath>

namespace elsa {

namespace {

constexpr std::string_view kProjections[] = {"q", "k", "v", "o", "up", "down"};

Matrix gaussian(Index rows, Index cols, double stddev, RngStream& rng) {
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = rng.normal(0.0, stddev);
  return m;
}

LayerNormParams make_layer_norm(Index d) {
  return {Tensor(Matrix::Ones(1, d)), Tensor(Matrix::Zero(1, d))};
}

LayerNormParams clone(const LayerNormParams& p) { return {p.gamma.clone(), p.beta.clone()}; }

Tensor ln_affine(const Tensor& x, const LayerNormParams& p) {
  const Tensor y = layer_norm(x);
  return add(mul(y, expand_rows(p.gamma, x.rows())), expand_rows(p.beta, x.rows()));
}

AdaptedLinear* projection(Block& b, std::string_view name) {
  if (name == "q") return &b.q;
  if (name == "k") return &b.k;
  if (name == "v") return &b.v;
  if (name == "o") return &b.o;
  if (name == "up") return &b.up;
  if (name == "down") return &b.down;
  throw ConfigurationError("unknown projection '" + std::string(name) + "'");
}

enum class GroupSide { none, out, in };

// How a projection participates in its block's width groups.
struct Membership {
  bool heads = false;
  bool mlp = false;
  GroupSide side = GroupSide::none;
};

Membership membership(std::string_view name) {
  if (name == "q" || name == "k" || name == "v") return {true, false, GroupSide::out};
  if (name == "o") return {true, false, GroupSide::in};
  if (name == "up") return {false, true, GroupSide::out};
  return {false, true, GroupSide::in};
}

void run_hook(const ActivationHook* hook, const AdaptedLinear& layer, const Tensor& x) {
  if (hook && *hook) (*hook)(layer.layer_id, x.value());
}

}  // namespace

std::string layer_name(Index block, std::string_view proj) {
  return "blocks." + std::to_string(block) + "." + std::string(proj);
}

std::string head_group(Index block) { return "blocks." + std::to_string(block) + ".heads"; }
std::string mlp_group(Index block) { return "blocks." + std::to_string(block) + ".mlp"; }

TinyTransformer TinyTransformer::init(const ModelDims& dims, RngStream& rng) {
  if (dims.width % dims.heads != 0) {
    throw ConfigurationError("model width " + std::to_string(dims.width) +
                             " not divisible by heads " + std::to_string(dims.heads));
  }
  if (dims.vocab < 2 || dims.depth < 1 || dims.mlp < 1 || dims.max_seq < 1) {
    throw ConfigurationError("model dimensions must be positive");
  }
  TinyTransformer m;
  m.dims = dims;
  m.head_dim = dims.width / dims.heads;
  const Index d = dims.width;
  const double lin = 1.0 / std::sqrt(static_cast<double>(d));
  m.tok_embed = Tensor(gaussian(dims.vocab, d, 1.0, rng));
  m.pos_embed = Tensor(gaussian(dims.max_seq, d, 0.5, rng));
  for (Index i = 0; i < dims.depth; ++i) {
    Block b;
    b.heads = dims.heads;
    b.mlp = dims.mlp;
    b.ln1 = make_layer_norm(d);
    b.ln2 = make_layer_norm(d);
    b.q = AdaptedLinear::create(layer_name(i, "q"), gaussian(d, d, lin, rng));
    b.k = AdaptedLinear::create(layer_name(i, "k"), gaussian(d, d, lin, rng));
    b.v = AdaptedLinear::create(layer_name(i, "v"), gaussian(d, d, lin, rng));
    b.o = AdaptedLinear::create(layer_name(i, "o"), gaussian(d, d, lin, rng));
    b.up = AdaptedLinear::create(layer_name(i, "up"), gaussian(d, dims.mlp, lin, rng));
    b.down = AdaptedLinear::create(layer_name(i, "down"),
                                   gaussian(dims.mlp, d, 1.0 / std::sqrt(static_cast<double>(dims.mlp)), rng));
    m.blocks.push_back(std::move(b));
  }
  m.ln_f = make_layer_norm(d);
  m.head = Tensor(gaussian(d, dims.vocab, lin, rng));
  return m;
}

TinyTransformer TinyTransformer::clone() const {
  TinyTransformer c;
  c.dims = dims;
  c.head_dim = head_dim;
  c.tok_embed = tok_embed.clone();
  c.pos_embed = pos_embed.clone();
  for (const auto& b : blocks) {
    Block nb;
    nb.heads = b.heads;
    nb.mlp = b.mlp;
    nb.ln1 = elsa::clone(b.ln1);
    nb.ln2 = elsa::clone(b.ln2);
    nb.q = b.q.clone();
    nb.k = b.k.clone();
    nb.v = b.v.clone();
    nb.o = b.o.clone();
    nb.up = b.up.clone();
    nb.down = b.down.clone();
    c.blocks.push_back(std::move(nb));
  }
  c.ln_f = elsa::clone(ln_f);
  c.head = head.clone();
  c.space = space;
  return c;
}

std::vector<AdaptedLinear*> TinyTransformer::linears() {
  std::vector<AdaptedLinear*> out;
  for (auto& b : blocks)
    for (auto name : kProjections) out.push_back(projection(b, name));
  return out;
}

std::vector<const AdaptedLinear*> TinyTransformer::linears() const {
  std::vector<const AdaptedLinear*> out;
  for (auto* l : const_cast<TinyTransformer*>(this)->linears()) out.push_back(l);
  return out;
}

AdaptedLinear& TinyTransformer::linear(std::string_view layer_id) {
  for (auto* l : linears())
    if (l->layer_id == layer_id) return *l;
  throw ConfigurationError("no layer named '" + std::string(layer_id) + "'");
}

const AdaptedLinear& TinyTransformer::linear(std::string_view layer_id) const {
  return const_cast<TinyTransformer*>(this)->linear(layer_id);
}

std::vector<Tensor> TinyTransformer::base_tensors() const {
  std::vector<Tensor> out = {tok_embed, pos_embed};
  for (const auto& b : blocks) {
    out.insert(out.end(), {b.ln1.gamma, b.ln1.beta, b.ln2.gamma, b.ln2.beta});
    out.insert(out.end(), {b.q.weight, b.k.weight, b.v.weight, b.o.weight, b.up.weight, b.down.weight});
  }
  out.insert(out.end(), {ln_f.gamma, ln_f.beta, head});
  return out;
}

std::vector<Tensor> TinyTransformer::adapter_tensors() const {
  std::vector<Tensor> out;
  for (const auto* l : linears()) {
    if (l->adapter) {
      out.push_back(l->adapter->l1);
      out.push_back(l->adapter->l2);
    }
  }
  return out;
}

bool TinyTransformer::has_adapters() const {
  const auto ls = linears();
  return std::any_of(ls.begin(), ls.end(), [](const AdaptedLinear* l) { return l->adapter.has_value(); });
}

void attach_adapters(TinyTransformer& model, const AdapterSpec& spec, RngStream& rng) {
  for (const auto& t : spec.targets) {
    if (std::find(std::begin(kProjections), std::end(kProjections), t) == std::end(kProjections)) {
      throw ConfigurationError("unknown adapter target '" + t + "'");
    }
  }
  const bool mode_b = spec.mode == ElasticMode::B;
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    Block& b = model.blocks[i];
    std::vector<Index> head_channels;
    for (Index h : spec.head_choices) head_channels.push_back(h * model.head_dim);
    if (mode_b && !spec.head_choices.empty() && spec.head_choices.back() != b.heads) {
      throw ConfigurationError(head_group(static_cast<Index>(i)) + ": largest head choice must equal " +
                               std::to_string(b.heads));
    }
    if (mode_b && !spec.mlp_choices.empty() && spec.mlp_choices.back() != b.mlp) {
      throw ConfigurationError(mlp_group(static_cast<Index>(i)) + ": largest width choice must equal " +
                               std::to_string(b.mlp));
    }
    for (auto name : kProjections) {
      if (std::find(spec.targets.begin(), spec.targets.end(), name) == spec.targets.end()) continue;
      AdaptedLinear& layer = *projection(b, name);
      std::vector<Index> in_choices, out_choices;
      if (mode_b) {
        const Membership mem = membership(name);
        const auto& choices = mem.heads ? head_channels : spec.mlp_choices;
        (mem.side == GroupSide::out ? out_choices : in_choices) = choices;
      }
      layer.adapter = ElasticAdapter::create(layer.in_features(), layer.out_features(), spec.rank_choices,
                                             spec.alpha, rng, spec.mode, in_choices, out_choices);
    }
  }
  model.space = derive_supernet(model);
}

SupernetConfig derive_supernet(const TinyTransformer& model) {
  SupernetConfig cfg;
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    const Block& b = model.blocks[i];
    std::optional<std::vector<Index>> heads_choices, mlp_choices;
    std::vector<LayerSpace> block_layers;
    for (auto name : kProjections) {
      const AdaptedLinear& layer = *projection(const_cast<Block&>(b), name);
      if (!layer.adapter) continue;
      const ElasticAdapter& ad = *layer.adapter;
      LayerSpace ls{layer.layer_id, ad.rank_choices, {}};
      if (ad.mode == ElasticMode::B) {
        const Membership mem = membership(name);
        const auto& choices = mem.side == GroupSide::out ? ad.out_choices : ad.in_choices;
        const std::string tag = mem.heads ? head_group(static_cast<Index>(i)) : mlp_group(static_cast<Index>(i));
        auto& slot = mem.heads ? heads_choices : mlp_choices;
        if (!choices.empty()) {
          if (slot && *slot != choices) {
            throw ConfigurationError("width group '" + tag + "' is misaligned: layer '" +
                                     layer.layer_id + "' declares different channel choices");
          }
          slot = choices;
          ls.width_group = tag;
        }
      }
      block_layers.push_back(std::move(ls));
    }
    cfg.layers.insert(cfg.layers.end(), block_layers.begin(), block_layers.end());
    if (heads_choices) {
      for (Index c : *heads_choices) {
        if (c % model.head_dim != 0) {
          throw ConfigurationError("width group '" + head_group(static_cast<Index>(i)) +
                                   "': channel choice " + std::to_string(c) +
                                   " is not a whole number of heads");
        }
      }
      cfg.groups.push_back({head_group(static_cast<Index>(i)), *heads_choices});
    }
    if (mlp_choices) cfg.groups.push_back({mlp_group(static_cast<Index>(i)), *mlp_choices});
  }
  cfg.validate();
  return cfg;
}

ModelActivation resolve_activation(const TinyTransformer& model, const SubnetGenome* genome) {
  if (genome) model.space.check(*genome);
  ModelActivation act;
  const Index d = model.dims.width;
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    const Block& b = model.blocks[i];
    BlockActivation ba;
    ba.heads = b.heads;
    ba.mlp = b.mlp;
    if (genome) {
      if (auto c = model.space.width_for(*genome, head_group(static_cast<Index>(i)))) {
        ba.heads = *c / model.head_dim;
      }
      if (auto c = model.space.width_for(*genome, mlp_group(static_cast<Index>(i)))) ba.mlp = *c;
    }
    const auto rank = [&](const AdaptedLinear& l) -> Index {
      if (!l.adapter) return 0;
      if (genome) {
        if (auto r = model.space.rank_for(*genome, l.layer_id)) return *r;
      }
      return l.adapter->max_rank();
    };
    const Index hc = ba.heads * model.head_dim;
    ba.q = {rank(b.q), d, hc};
    ba.k = {rank(b.k), d, hc};
    ba.v = {rank(b.v), d, hc};
    ba.o = {rank(b.o), hc, d};
    ba.up = {rank(b.up), d, ba.mlp};
    ba.down = {rank(b.down), ba.mlp, d};
    act.blocks.push_back(ba);
  }
  return act;
}

Tensor forward(const TinyTransformer& model, const TokenBatch& batch, const SubnetGenome* genome,
               const ActivationHook* hook) {
  return forward(model, batch, resolve_activation(model, genome), hook);
}

Tensor forward(const TinyTransformer& model, const TokenBatch& batch, const ModelActivation& act,
               const ActivationHook* hook) {
  const Index B = batch.batch;
  const Index T = batch.seq;
  if (static_cast<Index>(batch.ids.size()) != B * T) {
    throw DimensionError("forward: token batch holds " + std::to_string(batch.ids.size()) +
                         " ids for " + std::to_string(B) + "x" + std::to_string(T));
  }
  if (T > model.dims.max_seq) {
    throw DimensionError("forward: sequence length " + std::to_string(T) + " exceeds max_seq " +
                         std::to_string(model.dims.max_seq));
  }
  if (act.blocks.size() != model.blocks.size()) throw ConfigurationError("forward: activation/block count mismatch");

  std::vector<int> positions(static_cast<std::size_t>(B * T));
  for (Index i = 0; i < B * T; ++i) positions[static_cast<std::size_t>(i)] = static_cast<int>(i % T);

  Tensor x = add(embedding(batch.ids, model.tok_embed), embedding(positions, model.pos_embed));
  const auto linear = [&](const AdaptedLinear& layer, const Tensor& in, const LinearActivation& a) {
    run_hook(hook, layer, in);
    return linear_forward(layer, in, a);
  };
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    const Block& b = model.blocks[i];
    const BlockActivation& ba = act.blocks[i];
    const Tensor h = ln_affine(x, b.ln1);
    const Tensor q = linear(b.q, h, ba.q);
    const Tensor k = linear(b.k, h, ba.k);
    const Tensor v = linear(b.v, h, ba.v);
    const Tensor att = causal_attention(q, k, v, B, T, ba.heads, model.head_dim);
    x = add(x, linear(b.o, att, ba.o));
    const Tensor h2 = ln_affine(x, b.ln2);
    const Tensor u = gelu(linear(b.up, h2, ba.up));
    x = add(x, linear(b.down, u, ba.down));
  }
  x = ln_affine(x, model.ln_f);
  const Tensor logits = matmul(x, model.head);
  return reshape(logits, {B, T, model.dims.vocab});
}

}  // namespace elsa
