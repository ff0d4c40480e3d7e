#pragma once

#include "elsa/tensor.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <string_view>
#include <utility>
#include <vector>

namespace elsa {

/// Input activations captured at one layer, one row per token.
struct CalibrationBatch {
  Matrix x;
  Index tokens() const { return x.rows(); }
};

[[noreturn]] void throw_dimension_mismatch(const char* op, Index wr, Index wc, Index xr, Index xc);

/// Ψ(W)[i,j] = |W[i,j]| · ‖X[:, i]‖₂ for Y = X·W.
template <class DerivedW, class DerivedX>
Matrix wanda_score(const Eigen::MatrixBase<DerivedW>& w, const Eigen::MatrixBase<DerivedX>& x) {
  if (x.cols() != w.rows()) {
    throw_dimension_mismatch("wanda_score", w.rows(), w.cols(), x.rows(), x.cols());
  }
  const Eigen::RowVectorXd norms = x.colwise().norm();
  return (w.cwiseAbs().array().colwise() * norms.transpose().array()).matrix();
}

Matrix wanda_score(const Matrix& w, const CalibrationBatch& calib);
Matrix magnitude_score(const Matrix& w);


enum class PruneMetric { wanda, magnitude };
enum class Granularity { per_output, global };
PruneMetric parse_prune_metric(std::string_view s);
Granularity parse_granularity(std::string_view s);

/// Index set {(i, j) : W[i, j] != 0}, sorted row-major.
using SparsityPattern = std::vector<std::pair<Index, Index>>;

template <class Derived>
SparsityPattern sparsity_pattern(const Eigen::MatrixBase<Derived>& w) {
  SparsityPattern s;
  for (Index i = 0; i < w.rows(); ++i)
    for (Index j = 0; j < w.cols(); ++j)
      if (w(i, j) != 0.0) s.emplace_back(i, j);
  return s;
}

/// True when every nonzero of `inner` is also nonzero in `outer`.
bool pattern_subset(const SparsityPattern& inner, const SparsityPattern& outer);

template <class Derived>
double zero_fraction(const Eigen::MatrixBase<Derived>& w) {
  if (w.size() == 0) return 0.0;
  return static_cast<double>((w.array() == 0.0).count()) / static_cast<double>(w.size());
}

struct SparseWeights {
  Matrix weights;
  SparsityPattern pattern;
  double sparsity_level = 0.0;
};

/// Zeroes the ⌊level·m⌋ lowest-scoring entries of every output column
/// (per_output) or the ⌊level·m·n⌋ lowest overall (global). Equal scores are
/// pruned lower row index first.
SparseWeights prune(const Matrix& w, const Matrix& scores, double level,
                    Granularity granularity = Granularity::per_output);

using CodeMatrix = Eigen::Matrix<std::uint16_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Per-output-column asymmetric quantization parameters.
struct QuantParams {
  int bits = 4;
  std::vector<double> scales;
  std::vector<std::int64_t> zeros;
  /// Columns whose range collapsed (max == min) and fell back to scale 1.
  std::vector<std::uint8_t> degenerate;

  std::int64_t max_code() const { return (std::int64_t{1} << bits) - 1; }
  Index groups() const { return static_cast<Index>(scales.size()); }
  /// Parameters of the leading `cols` groups.
  QuantParams leading(Index cols) const;
};

struct QuantizedWeights {
  CodeMatrix codes;
  QuantParams params;
};

/// Min-max calibration: s = (max - min)/(2^b - 1), z = clamp(round(-min/s)).
QuantParams calibrate_quantization(const Matrix& w, int bits);

/// clamp(round(W / s) + z, 0, 2^b - 1) with frozen parameters.
CodeMatrix quantize_codes(const Matrix& w, const QuantParams& params);

QuantizedWeights quantize(const Matrix& w, int bits);

/// s · (q - z) per column.
Matrix dequantize(const CodeMatrix& codes, const QuantParams& params);
inline Matrix dequantize(const QuantizedWeights& qw) { return dequantize(qw.codes, qw.params); }

/// Differentiable quantize-dequantize with a straight-through gradient: the
/// incoming gradient passes unchanged where the unclamped code lies inside
/// [0, 2^b - 1] and is zeroed where clamping saturated.
Tensor fake_quantize(const Tensor& w, const QuantParams& params);

}  // namespace elsa
