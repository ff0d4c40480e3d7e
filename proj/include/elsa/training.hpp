#pragma once

#include "elsa/supernet.hpp"
#include "elsa/task.hpp"
#include "elsa/transformer.hpp"

#include <cstdint>
#include <vector>

namespace elsa {

struct TrainConfig {
  std::size_t steps = 500;
  Index batch_size = 32;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam over a fixed parameter list; moments live alongside each tensor.
class Adam {
 public:
  Adam(std::vector<Tensor> params, const TrainConfig& cfg);
  void step();
  void zero_grad();

 private:
  std::vector<Tensor> params_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  double lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
};

struct TrainLog {
  std::vector<double> losses;
  std::vector<SubnetGenome> genomes;
};

/// Adapter-only supernet training: per step, sample a genome, run forward and
/// cross-entropy, backpropagate, and update adapter tensors. Base weights are
/// never touched. Throws DivergenceError if the loss goes non-finite.
TrainLog train_adapters(TinyTransformer& model, const SyntheticTask& task, const TrainConfig& cfg,
                        const GenomeSampler& sampler, std::uint64_t seed);

/// Full-parameter training of a fresh base model (no adapters attached).
/// Produces the "pre-trained" weights that later stages freeze.
TrainLog pretrain_base(TinyTransformer& model, const SyntheticTask& task, const TrainConfig& cfg,
                       std::uint64_t seed);

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
  Index targets = 0;
};

/// Deterministic metrics over a split, in fixed batch order.
EvalResult evaluate(const TinyTransformer& model, const Split& split, const SubnetGenome* genome = nullptr,
                    Index batch_size = 256);

/// Argmax accuracy of logits [N × vocab] against labels, ignoring unlabelled rows.
double token_accuracy(const Matrix& logits, std::span<const int> labels);

}  // namespace elsa
