#pragma once

// Independent reference implementations used to check the library. They are
// written as plain loops over explicit formulas and share no code with the
// code under test.

#include "elsa/rng.hpp"
#include "elsa/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

namespace oracle {

using elsa::Index;
using elsa::Matrix;

inline Matrix random_matrix(Index rows, Index cols, elsa::RngStream& rng, double sd = 1.0) {
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = rng.normal(0.0, sd);
  return m;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix c = Matrix::Zero(a.rows(), b.cols());
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (Index k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  double m = 0.0;
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < a.cols(); ++j) m = std::max(m, std::abs(a(i, j) - b(i, j)));
  return m;
}

/// Min-max asymmetric quantization of one column, following the textbook
/// definition with round-half-away-from-zero replaced by round-half-even to
/// match IEEE nearbyint.
struct ColumnQuant {
  double scale;
  std::int64_t zero;
  std::vector<std::int64_t> codes;
};

inline ColumnQuant quantize_column(const std::vector<double>& col, int bits) {
  const double top = std::pow(2.0, bits) - 1.0;
  double lo = col[0], hi = col[0];
  for (double v : col) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  ColumnQuant q;
  q.scale = hi == lo ? 1.0 : (hi - lo) / top;
  q.zero = static_cast<std::int64_t>(std::min(top, std::max(0.0, std::nearbyint(-lo / q.scale))));
  for (double v : col) {
    const double c = std::nearbyint(v / q.scale) + static_cast<double>(q.zero);
    q.codes.push_back(static_cast<std::int64_t>(std::min(top, std::max(0.0, c))));
  }
  return q;
}

/// Parameter and MAC count of the carrier transformer written out term by
/// term. `ranks[b][k]` is the active adapter rank of projection k (q, k, v,
/// o, up, down) in block b, 0 without an adapter.
struct CarrierShape {
  Index vocab, width, max_seq, tokens, head_dim;
  std::vector<Index> heads, mlp;
  std::vector<std::vector<Index>> ranks;
};

inline std::int64_t carrier_params(const CarrierShape& s) {
  std::int64_t p = s.vocab * s.width + s.max_seq * s.width;
  for (std::size_t b = 0; b < s.heads.size(); ++b) {
    const Index d = s.width, hc = s.heads[b] * s.head_dim, f = s.mlp[b];
    p += 4 * d;                          // two layer norms
    p += 3 * d * hc + hc * d;            // q, k, v, o
    p += d * f + f * d;                  // up, down
    const Index dims[6][2] = {{d, hc}, {d, hc}, {d, hc}, {hc, d}, {d, f}, {f, d}};
    for (int k = 0; k < 6; ++k) p += s.ranks[b][k] * (dims[k][0] + dims[k][1]);
  }
  p += 2 * s.width + s.width * s.vocab;  // final norm and head
  return p;
}

inline std::int64_t carrier_macs(const CarrierShape& s) {
  const Index T = s.tokens;
  std::int64_t m = 0;
  for (std::size_t b = 0; b < s.heads.size(); ++b) {
    const Index d = s.width, hc = s.heads[b] * s.head_dim, f = s.mlp[b];
    const Index dims[6][2] = {{d, hc}, {d, hc}, {d, hc}, {hc, d}, {d, f}, {f, d}};
    for (int k = 0; k < 6; ++k) {
      m += T * dims[k][0] * dims[k][1];
      m += T * s.ranks[b][k] * (dims[k][0] + dims[k][1]);
    }
    m += T * T * hc;
  }
  m += T * s.width * s.vocab;
  return m;
}

}  // namespace oracle
