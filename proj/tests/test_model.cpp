#include "helpers.hpp"
#include "oracles.hpp"

#include "elsa/error.hpp"
#include "elsa/extract.hpp"
#include "elsa/training.hpp"
#include "elsa/transformer.hpp"

#include <doctest.h>

#include <cstring>
#include <set>

using namespace elsa;
using namespace testing_support;

namespace {

std::vector<Matrix> snapshot(const std::vector<Tensor>& ts) {
  std::vector<Matrix> out;
  for (const Tensor& t : ts) out.push_back(t.value());
  return out;
}

bool bit_identical(const std::vector<Matrix>& a, const std::vector<Matrix>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].size() != b[i].size()) return false;
    if (std::memcmp(a[i].data(), b[i].data(), sizeof(double) * static_cast<std::size_t>(a[i].size())) != 0) {
      return false;
    }
  }
  return true;
}

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("adapted linear hand example") {
    AdaptedLinear layer = AdaptedLinear::create("l", Matrix::Identity(2, 2));
    RngStream rng(0, 0);
    layer.adapter = ElasticAdapter::create(2, 2, {1}, 1.0, rng);
    layer.adapter->l1.mutable_value() << 1, 0;
    layer.adapter->l2.mutable_value() << 2, 0;
    Matrix x(1, 2);
    x << 1, 1;
    const Matrix y = linear_forward(layer, Tensor(x), layer.full_activation()).value();
    CHECK(y(0, 0) == 3.0);
    CHECK(y(0, 1) == 1.0);
  }

  TEST_CASE("zero adapters leave the logits of the base model unchanged") {
    TinyTransformer base = carrier(1);
    TinyTransformer adapted = base.clone();
    RngStream rng(1, streams::kAdapterInit);
    attach_adapters(adapted, AdapterSpec{}, rng);
    RngStream brng(2, 0);
    const TokenBatch batch = random_batch(3, 8, 64, brng);
    CHECK(forward(base, batch).value() == forward(adapted, batch).value());
  }

  TEST_CASE("max genome equals the static model forward") {
    TinyTransformer model = carrier(2);
    RngStream rng(2, streams::kAdapterInit);
    attach_adapters(model, mode_b_spec(), rng);
    randomize_adapters(model, 2);
    const TinyTransformer fixed = make_static(model);
    RngStream brng(3, 0);
    const TokenBatch batch = random_batch(4, 8, 64, brng);
    const SubnetGenome g = model.space.max_genome();
    CHECK(oracle::max_abs_diff(forward(model, batch, &g).value(), forward(fixed, batch).value()) <= 1e-12);
  }

  TEST_CASE("invalid genome names the offending layer") {
    TinyTransformer model = carrier(3);
    RngStream rng(3, streams::kAdapterInit);
    attach_adapters(model, AdapterSpec{}, rng);
    SubnetGenome g = model.space.max_genome();
    g.choices[2] = 7;
    RngStream brng(3, 0);
    try {
      forward(model, random_batch(1, 8, 64, brng), &g);
      FAIL("expected a configuration error");
    } catch (const ConfigurationError& e) {
      CHECK(std::string(e.what()).find(model.space.layers[2].layer_id) != std::string::npos);
    }
    g.choices.pop_back();
    CHECK_THROWS_AS(forward(model, random_batch(1, 8, 64, brng), &g), ConfigurationError);
  }

  TEST_CASE("every linear has a unique id and width must divide by heads") {
    const TinyTransformer model = carrier(4);
    std::set<std::string> ids;
    for (const AdaptedLinear* l : model.linears()) CHECK(ids.insert(l->layer_id).second);
    CHECK(ids.size() == 12);
    ModelDims bad;
    bad.heads = 5;
    RngStream rng(0, 0);
    CHECK_THROWS_AS(TinyTransformer::init(bad, rng), ConfigurationError);
  }

  TEST_CASE("forward is deterministic") {
    const TinyTransformer model = carrier(5);
    RngStream brng(5, 0);
    const TokenBatch batch = random_batch(2, 8, 64, brng);
    CHECK(forward(model, batch).value() == forward(model, batch).value());
  }

  TEST_CASE("training zero steps leaves the model unchanged") {
    TinyTransformer model = carrier(6);
    RngStream rng(6, streams::kAdapterInit);
    attach_adapters(model, AdapterSpec{}, rng);
    const auto before = snapshot(model.adapter_tensors());
    const SyntheticTask task = SyntheticTask::generate(small_task());
    TrainConfig cfg;
    cfg.steps = 0;
    const TrainLog log = train_adapters(model, task, cfg, GenomeSampler{}, 0);
    CHECK(log.losses.empty());
    CHECK(bit_identical(before, snapshot(model.adapter_tensors())));
  }

  TEST_CASE("training never touches frozen weights") {
    TinyTransformer model = carrier(7);
    RngStream rng(7, streams::kAdapterInit);
    attach_adapters(model, mode_b_spec(), rng);
    const auto base_before = snapshot(model.base_tensors());
    const auto adapters_before = snapshot(model.adapter_tensors());
    const SyntheticTask task = SyntheticTask::generate(small_task());
    TrainConfig cfg;
    cfg.steps = 20;
    cfg.batch_size = 8;
    const TrainLog log = train_adapters(model, task, cfg, GenomeSampler{}, 7);
    CHECK(log.losses.size() == 20);
    CHECK(log.genomes.size() == 20);
    CHECK(bit_identical(base_before, snapshot(model.base_tensors())));
    CHECK_FALSE(bit_identical(adapters_before, snapshot(model.adapter_tensors())));
  }

  TEST_CASE("training refuses trainable base weights and missing adapters") {
    TinyTransformer model = carrier(8);
    const SyntheticTask task = SyntheticTask::generate(small_task());
    CHECK_THROWS_AS(train_adapters(model, task, TrainConfig{}, GenomeSampler{}, 0), ContractError);
    RngStream rng(8, streams::kAdapterInit);
    attach_adapters(model, AdapterSpec{}, rng);
    model.tok_embed.set_requires_grad(true);
    CHECK_THROWS_AS(train_adapters(model, task, TrainConfig{}, GenomeSampler{}, 0), ContractError);
  }

  TEST_CASE("divergence aborts with the step index") {
    TinyTransformer model = carrier(9);
    RngStream rng(9, streams::kAdapterInit);
    attach_adapters(model, AdapterSpec{}, rng);
    model.linear("blocks.0.q").adapter->l1.mutable_value()(0, 0) = std::numeric_limits<double>::quiet_NaN();
    const SyntheticTask task = SyntheticTask::generate(small_task());
    TrainConfig cfg;
    cfg.steps = 3;
    try {
      train_adapters(model, task, cfg, GenomeSampler{}, 0);
      FAIL("expected divergence");
    } catch (const DivergenceError& e) {
      CHECK(std::string(e.what()).find("step 0") != std::string::npos);
    }
  }

  TEST_CASE("adapter-only training beats chance on modular_add") {
    TinyTransformer model = carrier(10);
    RngStream rng(10, streams::kAdapterInit);
    attach_adapters(model, AdapterSpec{}, rng);
    TaskSpec spec;
    const SyntheticTask task = SyntheticTask::generate(spec);
    TrainConfig cfg;
    cfg.steps = 500;
    const TrainLog log = train_adapters(model, task, cfg, GenomeSampler{}, 10);
    const double acc = evaluate(model, task.val).accuracy;
    MESSAGE("adapter-only accuracy on a random base: " << acc);
    CHECK(acc > 1.0 / static_cast<double>(spec.vocab));
    CHECK(log.losses.back() < log.losses.front());
  }

  TEST_CASE("constant logits score at chance") {
    TinyTransformer model = carrier(11);
    model.head.mutable_value().setZero();
    const SyntheticTask task = SyntheticTask::generate(TaskSpec{});
    const EvalResult r = evaluate(model, task.val);
    CHECK(r.accuracy == doctest::Approx(1.0 / 16).epsilon(0.5));
    CHECK(r.loss == doctest::Approx(std::log(64.0)));
  }

  TEST_CASE("evaluation is deterministic and handles max and midpoint genomes") {
    TinyTransformer model = carrier(12);
    RngStream rng(12, streams::kAdapterInit);
    attach_adapters(model, mode_b_spec(), rng);
    randomize_adapters(model, 12);
    const SyntheticTask task = SyntheticTask::generate(small_task());
    const EvalResult a = evaluate(model, task.val), b = evaluate(model, task.val);
    CHECK(a.accuracy == b.accuracy);
    CHECK(a.loss == b.loss);
    const SubnetGenome mid = heuristic_midpoint(model.space);
    const EvalResult m = evaluate(model, task.val, &mid);
    CHECK(m.targets == a.targets);
    Split empty;
    CHECK_THROWS_AS(evaluate(model, empty), ContractError);
  }

  TEST_CASE("synthetic tasks are reproducible, labelled correctly and disjoint") {
    TaskSpec spec = small_task();
    const SyntheticTask a = SyntheticTask::generate(spec), b = SyntheticTask::generate(spec);
    CHECK(a.train.tokens == b.train.tokens);
    CHECK(a.val.labels == b.val.labels);
    std::set<std::vector<int>> train;
    for (Index r = 0; r < a.train.size(); ++r) {
      const auto off = a.train.tokens.begin() + r * spec.seq_len;
      train.emplace(off, off + spec.seq_len);
    }
    for (Index r = 0; r < a.val.size(); ++r) {
      const auto off = a.val.tokens.begin() + r * spec.seq_len;
      CHECK_FALSE(train.count(std::vector<int>(off, off + spec.seq_len)));
    }
    for (std::size_t i = 0; i < a.train.tokens.size(); ++i) {
      const auto t = static_cast<Index>(i) % spec.seq_len;
      if (t == 0) {
        CHECK(a.train.labels[i] == kIgnoreLabel);
      } else {
        CHECK(a.train.labels[i] == (a.train.tokens[i - 1] + a.train.tokens[i]) % spec.modulus);
      }
    }
    spec.kind = TaskKind::copy;
    const SyntheticTask c = SyntheticTask::generate(spec);
    CHECK(c.train.labels[1] == c.train.tokens[0]);
  }
}
