#pragma once

#include "elsa/rng.hpp"
#include "elsa/stages.hpp"
#include "elsa/task.hpp"
#include "elsa/transformer.hpp"

namespace testing_support {

/// Default carrier with random base weights.
inline elsa::TinyTransformer carrier(std::uint64_t seed = 0, elsa::ModelDims dims = {}) {
  elsa::RngStream rng(seed, elsa::streams::kInit);
  return elsa::TinyTransformer::init(dims, rng);
}

/// Mode-B supernet on the default carrier with nonzero random adapters.
inline elsa::AdapterSpec mode_b_spec() {
  elsa::AdapterSpec spec;
  spec.mode = elsa::ElasticMode::B;
  spec.head_choices = {2, 3, 4};
  spec.mlp_choices = {64, 96, 128};
  return spec;
}

inline void randomize_adapters(elsa::TinyTransformer& model, std::uint64_t seed, double sd = 0.05) {
  elsa::RngStream rng(seed, 77);
  for (elsa::Tensor& t : model.adapter_tensors()) {
    for (elsa::Index i = 0; i < t.numel(); ++i) t.mutable_value().data()[i] = rng.normal(0.0, sd);
  }
}

inline elsa::TokenBatch random_batch(elsa::Index batch, elsa::Index seq, elsa::Index vocab, elsa::RngStream& rng) {
  elsa::TokenBatch b;
  b.batch = batch;
  b.seq = seq;
  for (elsa::Index i = 0; i < batch * seq; ++i) {
    b.ids.push_back(static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(vocab))));
    b.labels.push_back(i % seq == 0 ? elsa::kIgnoreLabel : static_cast<int>(rng.uniform_int(16)));
  }
  return b;
}

inline elsa::TaskSpec small_task() {
  elsa::TaskSpec t;
  t.train_size = 1024;
  t.val_size = 256;
  return t;
}

}  // namespace testing_support
