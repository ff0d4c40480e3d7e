#include "gradcheck.hpp"
#include "oracles.hpp"

#include "elsa/error.hpp"
#include "elsa/rng.hpp"
#include "elsa/tensor.hpp"

#include <doctest.h>

#include <cmath>
#include <set>

using namespace elsa;

namespace {

Matrix mat(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(static_cast<Index>(rows.size()), static_cast<Index>(rows.begin()->size()));
  Index i = 0;
  for (const auto& r : rows) {
    Index j = 0;
    for (double v : r) m(i, j++) = v;
    ++i;
  }
  return m;
}

}  // namespace

TEST_SUITE("numcore") {
  TEST_CASE("matmul examples") {
    const Matrix a = mat({{1, 2}, {3, 4}});
    CHECK(matmul(Tensor(a), Tensor(Matrix::Identity(2, 2))).value() == a);
    CHECK(matmul(Tensor(mat({{1, 0}, {0, 2}})), Tensor(mat({{3}, {5}}))).value() == mat({{3}, {10}}));
  }

  TEST_CASE("matmul shape mismatch names both shapes") {
    try {
      matmul(Tensor(Matrix::Zero(2, 3)), Tensor(Matrix::Zero(2, 2)));
      FAIL("expected a dimension error");
    } catch (const DimensionError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("2x3") != std::string::npos);
      CHECK(msg.find("2x2") != std::string::npos);
    }
  }

  TEST_CASE("matmul agrees with the loop oracle") {
    RngStream rng(3, 0);
    const Matrix a = oracle::random_matrix(7, 5, rng), b = oracle::random_matrix(5, 4, rng);
    CHECK(oracle::max_abs_diff(matmul(Tensor(a), Tensor(b)).value(), oracle::matmul(a, b)) < 1e-12);
  }

  TEST_CASE("identity products are exact") {
    const Matrix a = mat({{1.5, -2}, {0.25, 8}, {3, 4}});
    CHECK(matmul(Tensor(Matrix::Identity(3, 3)), Tensor(a)).value() == a);
    CHECK(matmul(Tensor(a), Tensor(Matrix::Identity(2, 2))).value() == a);
  }

  TEST_CASE("elementwise examples") {
    CHECK(mask(Tensor(mat({{1, 2}, {3, 4}})), Tensor(mat({{1, 0}, {0, 1}}))).value() == mat({{1, 0}, {0, 4}}));
    const Matrix x = mat({{1, -2}, {0.5, 9}});
    CHECK(add(Tensor(x), Tensor(Matrix::Zero(2, 2))).value() == x);
    CHECK(mul(Tensor(mat({{2, 3}})), Tensor(mat({{4, 5}}))).value() == mat({{8, 15}}));
    CHECK_THROWS_AS(add(Tensor(Matrix::Zero(2, 2)), Tensor(Matrix::Zero(2, 3))), DimensionError);
  }

  TEST_CASE("nn op examples") {
    const Matrix s = softmax(Tensor(mat({{0, 0}}))).value();
    CHECK(s(0, 0) == doctest::Approx(0.5));
    CHECK(s(0, 1) == doctest::Approx(0.5));
    CHECK(layer_norm(Tensor(mat({{3, 3, 3, 3}}))).value().cwiseAbs().maxCoeff() == 0.0);
    const std::vector<int> label = {0};
    CHECK(cross_entropy(Tensor(mat({{0, 0}})), label).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    const std::vector<int> bad = {2};
    CHECK_THROWS_AS(cross_entropy(Tensor(mat({{0, 0}})), bad), IndexError);
  }

  TEST_CASE("gelu matches the erf form") {
    const Matrix x = mat({{-3, -0.5, 0, 0.7, 2.5}});
    const Matrix y = gelu(Tensor(x)).value();
    for (Index j = 0; j < x.cols(); ++j) {
      const double v = x(0, j);
      CHECK(y(0, j) == doctest::Approx(0.5 * v * (1 + std::erf(v / std::sqrt(2.0)))).epsilon(1e-14));
    }
  }

  TEST_CASE("causal attention ignores future positions") {
    RngStream rng(5, 0);
    const Matrix q = oracle::random_matrix(4, 4, rng), k = oracle::random_matrix(4, 4, rng);
    Matrix v = oracle::random_matrix(4, 4, rng);
    const Matrix before = causal_attention(Tensor(q), Tensor(k), Tensor(v), 1, 4, 2, 2).value();
    v.row(3).setConstant(100.0);
    const Matrix after = causal_attention(Tensor(q), Tensor(k), Tensor(v), 1, 4, 2, 2).value();
    CHECK(oracle::max_abs_diff(before.topRows(3), after.topRows(3)) == 0.0);
    // First position attends only to itself.
    CHECK(oracle::max_abs_diff(before.row(0), v.row(0)) < 1e-12);
  }

  TEST_CASE("backward of sum(w*x) gives x; frozen tensors get nothing") {
    const Tensor w(mat({{1, 2, 3}}), true);
    const Tensor x(mat({{4, -5, 6}}), false);
    Tape tape;
    {
      TapeScope scope(tape);
      backward(sum(mul(w, x)));
    }
    REQUIRE(w.grad());
    CHECK(*w.grad() == x.value());
    CHECK_FALSE(x.grad());
  }

  TEST_CASE("backward requires a scalar loss") {
    const Tensor w(mat({{1, 2}}), true);
    Tape tape;
    TapeScope scope(tape);
    const Tensor y = scale(w, 2.0);
    CHECK_THROWS_AS(backward(y), ContractError);
  }

  TEST_CASE("a tensor used twice accumulates both contributions") {
    const Tensor w(mat({{1.5, -2}}), true);
    Tape tape;
    {
      TapeScope scope(tape);
      backward(sum(add(scale(w, 3.0), mul(w, w))));
    }
    CHECK(*w.grad() == mat({{3 + 2 * 1.5, 3 - 4}}));
  }

  TEST_CASE("tape replays each record once in reverse order") {
    const Tensor w(mat({{1, 2}}), true);
    Tape tape;
    TapeScope scope(tape);
    const Tensor a = scale(w, 2.0);
    const Tensor b = add(a, w);
    const Tensor loss = sum(b);
    CHECK(tape.size() == 3);
    const auto& recs = tape.records();
    std::set<std::uint64_t> seen;
    for (const auto& r : recs) {
      for (std::uint64_t id : r.input_ids) CHECK((id == w.id() || seen.count(id)));
      seen.insert(r.output.id());
    }
    backward(loss);
    CHECK(*w.grad() == mat({{3, 3}}));
  }

  TEST_CASE("ops do not record without a tape or without trainable inputs") {
    const Tensor w(mat({{1, 2}}), true);
    CHECK_FALSE(scale(w, 2.0).requires_grad());
    Tape tape;
    TapeScope scope(tape);
    scale(Tensor(mat({{1, 2}})), 2.0);
    CHECK(tape.size() == 0);
    {
      NoTapeScope pause;
      scale(w, 2.0);
    }
    CHECK(tape.size() == 0);
  }

  TEST_CASE("ops do not mutate their inputs") {
    RngStream rng(11, 0);
    const Matrix a0 = oracle::random_matrix(4, 4, rng), b0 = oracle::random_matrix(4, 4, rng);
    const Tensor a(a0, true), b(b0, true);
    Tape tape;
    TapeScope scope(tape);
    const std::vector<int> labels = {0, 1, 2, 3};
    backward(cross_entropy(add(softmax(matmul(a, b)), layer_norm(gelu(mul(a, b)))), labels));
    CHECK(a.value() == a0);
    CHECK(b.value() == b0);
  }

  TEST_CASE("every op passes the finite-difference check") {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      for (const auto& c : gradcheck::all_ops(seed)) {
        INFO(c.name << " seed " << seed);
        CHECK(c.rel_error <= 1e-4);
      }
    }
  }

  TEST_CASE("gradients flow only into the leading block") {
    RngStream rng(2, 0);
    const Tensor x(oracle::random_matrix(3, 2, rng), false);
    const Tensor w(oracle::random_matrix(4, 5, rng), true);
    Tape tape;
    {
      TapeScope scope(tape);
      backward(sum(matmul_leading(x, w, 2, 3)));
    }
    const Matrix& g = *w.grad();
    CHECK(g.bottomRows(2).cwiseAbs().maxCoeff() == 0.0);
    CHECK(g.rightCols(2).cwiseAbs().maxCoeff() == 0.0);
    CHECK(g.topLeftCorner(2, 3).cwiseAbs().minCoeff() > 0.0);
  }

  TEST_CASE("tensor shape invariants") {
    CHECK_THROWS_AS(Tensor(Shape{2, 3}, Matrix::Zero(2, 2)), DimensionError);
    const Tensor t(Shape{2, 3, 4}, Matrix::Zero(6, 4));
    CHECK(t.numel() == 24);
    CHECK(shape_string(t.shape()) == "[2x3x4]");
  }

  TEST_CASE("rng determinism and stream separation") {
    RngStream a(42, 7), b(42, 7), c(42, 8);
    bool differs = false;
    for (int i = 0; i < 100; ++i) {
      const std::uint64_t x = a.next_u64();
      CHECK(x == b.next_u64());
      differs = differs || x != c.next_u64();
    }
    CHECK(differs);
  }

  TEST_CASE("rng known-answer for Philox4x32-10") {
    // Published test vector: counter 0, key 0 -> 6627e8d5 e169c58d bc57ac4c 9b00dbd8.
    RngStream r(0, 0);
    const std::uint64_t first = r.next_u64();
    const std::uint64_t second = r.next_u64();
    CHECK(first == ((std::uint64_t{0x6627e8d5} << 32) | 0xe169c58d));
    CHECK(second == ((std::uint64_t{0xbc57ac4c} << 32) | 0x9b00dbd8));
  }

  TEST_CASE("normal draws have mean near zero and unit variance") {
    RngStream r(9, 1);
    double s = 0.0, s2 = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
      const double x = r.normal();
      s += x;
      s2 += x * x;
    }
    CHECK(std::abs(s / n) < 0.02);
    CHECK(std::abs(s2 / n - 1.0) < 0.03);
  }

  TEST_CASE("uniform_int stays in range and covers it") {
    RngStream r(4, 4);
    std::vector<int> counts(7, 0);
    for (int i = 0; i < 7000; ++i) {
      const auto v = r.uniform_int(7);
      REQUIRE(v < 7);
      ++counts[v];
    }
    for (int c : counts) CHECK(std::abs(c - 1000) < 150);
  }

  TEST_CASE("split streams are reproducible and distinct") {
    const RngStream root(1, 2);
    RngStream a = root.split(3), b = root.split(3), c = root.split(4);
    const auto x = a.next_u64();
    CHECK(x == b.next_u64());
    CHECK(x != c.next_u64());
  }
}
