#pragma once

#include "elsa/supernet.hpp"
#include "elsa/transformer.hpp"

namespace elsa {

/// Copies the slices activated by `genome` into a standalone static model:
/// frozen weight blocks, adapter blocks at the chosen rank, masks and
/// quantization parameters. The result has a single-choice search space and
/// reproduces `forward(model, ·, genome)`.
TinyTransformer extract_subnet(const TinyTransformer& model, const SubnetGenome& genome);

/// Vanilla-LoRA copy of `model`: same weights, every adapter pinned to its
/// maximum rank with no channel elasticity.
TinyTransformer make_static(const TinyTransformer& model);

}  // namespace elsa
