#include "elsa/training.hpp"

#include "elsa/error.hpp"
#include "elsa/rng.hpp"

#include <cmath>

namespace elsa {

Adam::Adam(std::vector<Tensor> params, const TrainConfig& cfg)
    : params_(std::move(params)), lr_(cfg.lr), beta1_(cfg.beta1), beta2_(cfg.beta2), eps_(cfg.eps) {
  for (const auto& p : params_) {
    m_.push_back(Matrix::Zero(p.rows(), p.cols()));
    v_.push_back(Matrix::Zero(p.rows(), p.cols()));
  }
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& g = params_[i].grad();
    if (!g) continue;
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * *g;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g->cwiseProduct(*g);
    const auto mhat = m_[i].array() / c1;
    const auto vhat = v_[i].array() / c2;
    params_[i].mutable_value().array() -= lr_ * mhat / (vhat.sqrt() + eps_);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

namespace {

TokenBatch sample_batch(const Split& split, Index batch_size, RngStream& rng) {
  std::vector<Index> rows(static_cast<std::size_t>(batch_size));
  for (auto& r : rows) r = static_cast<Index>(rng.uniform_int(static_cast<std::uint64_t>(split.size())));
  return split.gather(rows);
}

double run_step(const TinyTransformer& model, const TokenBatch& batch, const SubnetGenome* genome,
                Adam& opt, std::size_t step) {
  Tape tape;
  double loss_value;
  {
    TapeScope scope(tape);
    const Tensor logits = forward(model, batch, genome);
    const Tensor flat = reshape(logits, {batch.batch * batch.seq, model.dims.vocab});
    const Tensor loss = cross_entropy(flat, batch.labels);
    loss_value = loss.item();
    if (!std::isfinite(loss_value)) {
      throw DivergenceError("training diverged at step " + std::to_string(step) + " (loss " +
                            std::to_string(loss_value) + ")");
    }
    backward(loss);
  }
  opt.step();
  opt.zero_grad();
  return loss_value;
}

}  // namespace

TrainLog train_adapters(TinyTransformer& model, const SyntheticTask& task, const TrainConfig& cfg,
                        const GenomeSampler& sampler, std::uint64_t seed) {
  const auto params = model.adapter_tensors();
  if (params.empty()) throw ContractError("train_adapters: no adapters attached");
  for (const auto& p : params) {
    if (!p.requires_grad()) throw ContractError("train_adapters: adapter tensor not trainable");
  }
  for (const auto& p : model.base_tensors()) {
    if (p.requires_grad()) throw ContractError("train_adapters: base tensor is not frozen");
  }
  Adam opt(params, cfg);
  RngStream batch_rng(seed, streams::kBatches);
  RngStream genome_rng(seed, streams::kSampler);
  TrainLog log;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const SubnetGenome g = sampler.sample(model.space, step, genome_rng);
    const TokenBatch batch = sample_batch(task.train, cfg.batch_size, batch_rng);
    log.losses.push_back(run_step(model, batch, &g, opt, step));
    log.genomes.push_back(g);
  }
  return log;
}

TrainLog pretrain_base(TinyTransformer& model, const SyntheticTask& task, const TrainConfig& cfg,
                       std::uint64_t seed) {
  if (model.has_adapters()) throw ContractError("pretrain_base: adapters already attached");
  auto params = model.base_tensors();
  for (auto& p : params) p.set_requires_grad(true);
  Adam opt(params, cfg);
  RngStream batch_rng(seed, streams::kPretrain);
  TrainLog log;
  try {
    for (std::size_t step = 0; step < cfg.steps; ++step) {
      const TokenBatch batch = sample_batch(task.train, cfg.batch_size, batch_rng);
      log.losses.push_back(run_step(model, batch, nullptr, opt, step));
    }
  } catch (...) {
    for (auto& p : params) p.set_requires_grad(false);
    throw;
  }
  for (auto& p : params) p.set_requires_grad(false);
  return log;
}

double token_accuracy(const Matrix& logits, std::span<const int> labels) {
  Index correct = 0, total = 0;
  for (Index r = 0; r < logits.rows(); ++r) {
    const int label = labels[static_cast<std::size_t>(r)];
    if (label == kIgnoreLabel) continue;
    Index arg;
    logits.row(r).maxCoeff(&arg);
    correct += arg == label;
    ++total;
  }
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

EvalResult evaluate(const TinyTransformer& model, const Split& split, const SubnetGenome* genome,
                    Index batch_size) {
  if (split.size() == 0 || split.target_count() == 0) throw ContractError("evaluate: empty split");
  NoTapeScope no_tape;
  const ModelActivation act = resolve_activation(model, genome);
  double loss_sum = 0.0;
  Index correct = 0, total = 0;
  for (Index begin = 0; begin < split.size(); begin += batch_size) {
    const Index end = std::min(split.size(), begin + batch_size);
    const TokenBatch batch = split.range(begin, end);
    const Tensor logits = forward(model, batch, act);
    const Matrix flat = Eigen::Map<const Matrix>(logits.value().data(), batch.batch * batch.seq,
                                                 model.dims.vocab);
    for (Index r = 0; r < flat.rows(); ++r) {
      const int label = batch.labels[static_cast<std::size_t>(r)];
      if (label == kIgnoreLabel) continue;
      const double mx = flat.row(r).maxCoeff();
      const double lse = mx + std::log((flat.row(r).array() - mx).exp().sum());
      loss_sum += lse - flat(r, label);
      Index arg;
      flat.row(r).maxCoeff(&arg);
      correct += arg == label;
      ++total;
    }
  }
  EvalResult res;
  res.loss = loss_sum / static_cast<double>(total);
  res.accuracy = static_cast<double>(correct) / static_cast<double>(total);
  res.targets = total;
  return res;
}

}  // namespace elsa
