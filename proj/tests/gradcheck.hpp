#pragma once

// Central finite-difference gradient checks for every differentiable op.

#include "elsa/adapter.hpp"
#include "elsa/linear.hpp"
#include "elsa/rng.hpp"
#include "elsa/tensor.hpp"

#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace gradcheck {

using elsa::Index;
using elsa::Matrix;
using elsa::Tensor;

using Fn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Scalar probe: sum(f(x) ⊙ R) for a fixed random R, so every output element
/// carries a distinct weight.
inline Tensor probe(const Tensor& out, std::uint64_t seed) {
  if (out.numel() == 1) return out;
  elsa::RngStream rng(seed, 99);
  Matrix r(out.rows(), out.cols());
  for (Index i = 0; i < r.size(); ++i) r.data()[i] = rng.normal();
  return elsa::sum(elsa::mul(out, Tensor(out.shape(), r)));
}

/// Largest relative error ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)
/// over the inputs that require a gradient, with h = 1e-5.
inline double check(const Fn& f, std::vector<Tensor> inputs, std::uint64_t seed = 1) {
  for (Tensor& t : inputs) t.zero_grad();
  elsa::Tape tape;
  {
    elsa::TapeScope scope(tape);
    const Tensor loss = probe(f(inputs), seed);
    elsa::backward(loss);
  }
  const auto value = [&] {
    elsa::NoTapeScope no_tape;
    return probe(f(inputs), seed).item();
  };
  double worst = 0.0;
  constexpr double h = 1e-5;
  for (Tensor& t : inputs) {
    if (!t.requires_grad()) continue;
    Matrix numeric(t.rows(), t.cols());
    for (Index i = 0; i < t.numel(); ++i) {
      double& x = t.mutable_value().data()[i];
      const double saved = x;
      x = saved + h;
      const double up = value();
      x = saved - h;
      const double down = value();
      x = saved;
      numeric.data()[i] = (up - down) / (2 * h);
    }
    const Matrix analytic = t.grad() ? *t.grad() : Matrix::Zero(t.rows(), t.cols());
    const double denom = std::max(analytic.norm(), numeric.norm());
    if (denom < 1e-12) continue;
    worst = std::max(worst, (analytic - numeric).norm() / denom);
  }
  return worst;
}

inline Tensor leaf(Index rows, Index cols, elsa::RngStream& rng, bool grad = true, double sd = 1.0) {
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(0.0, sd);
  return Tensor(m, grad);
}

struct OpCase {
  std::string name;
  double rel_error;
};

/// Runs the finite-difference check on every differentiable op.
inline std::vector<OpCase> all_ops(std::uint64_t seed) {
  using namespace elsa;
  RngStream rng(seed, 1);
  std::vector<OpCase> out;
  const auto run = [&](const std::string& name, const Fn& f, std::vector<Tensor> in) {
    out.push_back({name, check(f, std::move(in), seed)});
  };
  run("matmul", [](auto& x) { return matmul(x[0], x[1]); }, {leaf(3, 4, rng), leaf(4, 5, rng)});
  run("matmul_leading", [](auto& x) { return matmul_leading(x[0], x[1], 3, 2); },
      {leaf(4, 3, rng), leaf(5, 4, rng)});
  run("leading_block", [](auto& x) { return leading_block(x[0], 2, 3); }, {leaf(4, 5, rng)});
  run("add", [](auto& x) { return add(x[0], x[1]); }, {leaf(3, 4, rng), leaf(3, 4, rng)});
  run("sub", [](auto& x) { return sub(x[0], x[1]); }, {leaf(3, 4, rng), leaf(3, 4, rng)});
  run("mul", [](auto& x) { return mul(x[0], x[1]); }, {leaf(3, 4, rng), leaf(3, 4, rng)});
  {
    Matrix m(3, 4);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = i % 3 == 0 ? 0.0 : 1.0;
    run("mask", [](auto& x) { return mask(x[0], x[1]); }, {leaf(3, 4, rng), Tensor(m)});
  }
  run("scale", [](auto& x) { return scale(x[0], -1.7); }, {leaf(3, 4, rng)});
  run("sum", [](auto& x) { return sum(x[0]); }, {leaf(3, 4, rng)});
  run("reshape", [](auto& x) { return reshape(x[0], {2, 3, 2}); }, {leaf(6, 2, rng)});
  run("expand_rows", [](auto& x) { return expand_rows(x[0], 4); }, {leaf(1, 5, rng)});
  run("softmax", [](auto& x) { return softmax(x[0]); }, {leaf(3, 5, rng)});
  run("layer_norm", [](auto& x) { return layer_norm(x[0]); }, {leaf(3, 6, rng)});
  run("gelu", [](auto& x) { return gelu(x[0]); }, {leaf(3, 5, rng, true, 2.0)});
  {
    const std::vector<int> ids = {3, 0, 3, 5, 1};
    run("embedding", [ids](auto& x) { return embedding(ids, x[0]); }, {leaf(6, 4, rng)});
  }
  {
    const std::vector<int> labels = {2, kIgnoreLabel, 0, 4};
    run("cross_entropy", [labels](auto& x) { return cross_entropy(x[0], labels); }, {leaf(4, 5, rng)});
  }
  run("causal_attention", [](auto& x) { return causal_attention(x[0], x[1], x[2], 2, 3, 2, 2); },
      {leaf(6, 4, rng), leaf(6, 4, rng), leaf(6, 4, rng)});
  {
    ElasticAdapter ad = ElasticAdapter::create(5, 6, {2, 4}, 8.0, rng, ElasticMode::B, {3, 5}, {4, 6});
    ad.l2.mutable_value() = leaf(4, 6, rng).value();
    run("adapter_forward", [ad](auto& x) {
          ElasticAdapter a = ad;
          a.l1 = x[1];
          a.l2 = x[2];
          return adapter_forward(a, x[0], {2, 3, 4});
        },
        {leaf(3, 3, rng), ad.l1, ad.l2});
    run("adapter_product", [ad](auto& x) {
          ElasticAdapter a = ad;
          a.l1 = x[0];
          a.l2 = x[1];
          return adapter_product(a, {4, 5, 6});
        },
        {ad.l1, ad.l2});
  }
  {
    AdaptedLinear layer = AdaptedLinear::create("probe", leaf(5, 6, rng, false).value());
    layer.adapter = ElasticAdapter::create(5, 6, {3}, 3.0, rng);
    layer.adapter->l2.mutable_value() = leaf(3, 6, rng).value();
    Matrix m(5, 6);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = (i * 7) % 3 == 0 ? 0.0 : 1.0;
    layer.weight.mutable_value() = layer.weight.value().cwiseProduct(m);
    layer.mask = m;
    layer.mask_adapter = true;
    run("linear_forward_sparsepeft", [layer](auto& x) {
          AdaptedLinear l = layer;
          l.adapter->l1 = x[1];
          l.adapter->l2 = x[2];
          return linear_forward(l, x[0], l.full_activation());
        },
        {leaf(4, 5, rng), layer.adapter->l1, layer.adapter->l2});
  }
  return out;
}

}  // namespace gradcheck
