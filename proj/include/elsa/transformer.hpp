#pragma once

#include "elsa/linear.hpp"
#include "elsa/rng.hpp"
#include "elsa/supernet.hpp"
#include "elsa/task.hpp"

#include <functional>
#include <string>
#include <string_view>
#include <vector>

namespace elsa {

struct ModelDims {
  Index vocab = 64;
  Index width = 32;
  Index heads = 4;
  Index mlp = 128;
  Index depth = 2;
  Index max_seq = 16;
};

struct LayerNormParams {
  Tensor gamma;  // 1 × d
  Tensor beta;   // 1 × d
};

/// Pre-norm decoder block. `heads` and `mlp` are the physical sizes, which
/// shrink after subnet extraction.
struct Block {
  Index heads = 0;
  Index mlp = 0;
  LayerNormParams ln1;
  LayerNormParams ln2;
  AdaptedLinear q, k, v, o;
  AdaptedLinear up, down;
};

/// Sizes activated in one block for a given genome.
struct BlockActivation {
  Index heads = 0;
  Index mlp = 0;
  LinearActivation q, k, v, o, up, down;
};

struct ModelActivation {
  std::vector<BlockActivation> blocks;
};

/// Which projections receive adapters and how elastic they are.
struct AdapterSpec {
  /// Any of "q", "k", "v", "o", "up", "down".
  std::vector<std::string> targets = {"q", "v", "up", "down"};
  std::vector<Index> rank_choices = {4, 6, 8};
  double alpha = 16.0;
  ElasticMode mode = ElasticMode::A;
  /// Mode B: permitted active head counts and MLP widths.
  std::vector<Index> head_choices;
  std::vector<Index> mlp_choices;
};

/// Receives the input activations of every linear layer during forward.
using ActivationHook = std::function<void(const std::string& layer_id, const Matrix& x)>;

struct TinyTransformer {
  ModelDims dims;
  Index head_dim = 0;
  Tensor tok_embed;  // vocab × d
  Tensor pos_embed;  // max_seq × d
  std::vector<Block> blocks;
  LayerNormParams ln_f;
  Tensor head;  // d × vocab
  SupernetConfig space;

  /// Random base weights; no adapters.
  static TinyTransformer init(const ModelDims& dims, RngStream& rng);

  TinyTransformer clone() const;

  std::vector<AdaptedLinear*> linears();
  std::vector<const AdaptedLinear*> linears() const;
  AdaptedLinear& linear(std::string_view layer_id);
  const AdaptedLinear& linear(std::string_view layer_id) const;

  /// Every non-adapter tensor, in a stable order.
  std::vector<Tensor> base_tensors() const;
  std::vector<Tensor> adapter_tensors() const;
  bool has_adapters() const;
};

/// Layer ids follow "blocks.<i>.<name>" with name in {q,k,v,o,up,down}.
std::string layer_name(Index block, std::string_view proj);

/// Attaches fresh adapters to the targeted projections and rebuilds `space`.
void attach_adapters(TinyTransformer& model, const AdapterSpec& spec, RngStream& rng);

/// Width-group tags used by Mode B.
std::string head_group(Index block);
std::string mlp_group(Index block);

/// Resolves a genome (nullptr = max) into per-layer sizes. Errors name the
/// offending layer or group.
ModelActivation resolve_activation(const TinyTransformer& model, const SubnetGenome* genome);

/// Logits [batch × seq × vocab].
Tensor forward(const TinyTransformer& model, const TokenBatch& batch,
               const SubnetGenome* genome = nullptr, const ActivationHook* hook = nullptr);
Tensor forward(const TinyTransformer& model, const TokenBatch& batch, const ModelActivation& act,
               const ActivationHook* hook = nullptr);

}  // namespace elsa

namespace elsa {

/// Rebuilds the search space from the attached adapters. Members of a width
/// group must declare identical channel choices; a mismatch is reported with
/// the group tag.
SupernetConfig derive_supernet(const TinyTransformer& model);

}  // namespace elsa
