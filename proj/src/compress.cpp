#include "elsa/compress.hpp"

#include "elsa/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace elsa {

void throw_dimension_mismatch(const char* op, Index wr, Index wc, Index xr, Index xc) {
  throw DimensionError(std::string(op) + ": calibration features [" + std::to_string(xr) + "x" +
                       std::to_string(xc) + "] do not match weight rows [" + std::to_string(wr) +
                       "x" + std::to_string(wc) + "]");
}

Matrix wanda_score(const Matrix& w, const CalibrationBatch& calib) {
  if (calib.tokens() < 1) throw ContractError("wanda_score: empty calibration batch");
  return wanda_score(w, calib.x);
}

Matrix magnitude_score(const Matrix& w) { return w.cwiseAbs(); }

PruneMetric parse_prune_metric(std::string_view s) {
  if (s == "wanda") return PruneMetric::wanda;
  if (s == "magnitude") return PruneMetric::magnitude;
  throw ConfigurationError("unknown pruning metric '" + std::string(s) + "'");
}

Granularity parse_granularity(std::string_view s) {
  if (s == "per_output") return Granularity::per_output;
  if (s == "global") return Granularity::global;
  throw ConfigurationError("unknown pruning granularity '" + std::string(s) + "'");
}

bool pattern_subset(const SparsityPattern& inner, const SparsityPattern& outer) {
  return std::includes(outer.begin(), outer.end(), inner.begin(), inner.end());
}

SparseWeights prune(const Matrix& w, const Matrix& scores, double level, Granularity granularity) {
  if (!(level >= 0.0 && level < 1.0)) {
    throw ValueError("prune: sparsity level " + std::to_string(level) + " outside [0, 1)");
  }
  if (scores.rows() != w.rows() || scores.cols() != w.cols()) {
    throw DimensionError("prune: score matrix shape does not match weights");
  }
  SparseWeights out;
  out.weights = w;
  out.sparsity_level = level;
  const Index m = w.rows();
  const Index n = w.cols();

  if (granularity == Granularity::per_output) {
    const auto k = static_cast<Index>(std::floor(level * static_cast<double>(m)));
    std::vector<Index> rows(static_cast<std::size_t>(m));
    for (Index j = 0; j < n; ++j) {
      std::iota(rows.begin(), rows.end(), Index{0});
      std::stable_sort(rows.begin(), rows.end(),
                       [&](Index a, Index b) { return scores(a, j) < scores(b, j); });
      for (Index t = 0; t < k; ++t) out.weights(rows[static_cast<std::size_t>(t)], j) = 0.0;
    }
  } else {
    const auto k = static_cast<Index>(std::floor(level * static_cast<double>(m * n)));
    std::vector<Index> flat(static_cast<std::size_t>(m * n));
    std::iota(flat.begin(), flat.end(), Index{0});
    // Row-major flat index preserves the lower-row-first tie order.
    std::stable_sort(flat.begin(), flat.end(), [&](Index a, Index b) {
      return scores(a / n, a % n) < scores(b / n, b % n);
    });
    for (Index t = 0; t < k; ++t) {
      const Index f = flat[static_cast<std::size_t>(t)];
      out.weights(f / n, f % n) = 0.0;
    }
  }
  out.pattern = sparsity_pattern(out.weights);
  return out;
}

QuantParams QuantParams::leading(Index cols) const {
  QuantParams p;
  p.bits = bits;
  p.scales.assign(scales.begin(), scales.begin() + cols);
  p.zeros.assign(zeros.begin(), zeros.begin() + cols);
  p.degenerate.assign(degenerate.begin(), degenerate.begin() + cols);
  return p;
}

QuantParams calibrate_quantization(const Matrix& w, int bits) {
  if (bits < 2 || bits > 8) throw ValueError("quantize: bit width " + std::to_string(bits) + " outside [2, 8]");
  if (!w.allFinite()) throw ValueError("quantize: non-finite weights");
  QuantParams p;
  p.bits = bits;
  const double levels = static_cast<double>(p.max_code());
  for (Index j = 0; j < w.cols(); ++j) {
    const double lo = w.col(j).minCoeff();
    const double hi = w.col(j).maxCoeff();
    const bool flat = !(hi > lo);
    const double s = flat ? 1.0 : (hi - lo) / levels;
    const double z = std::clamp(std::nearbyint(-lo / s), 0.0, levels);
    p.scales.push_back(s);
    p.zeros.push_back(static_cast<std::int64_t>(z));
    p.degenerate.push_back(flat ? 1 : 0);
  }
  return p;
}

CodeMatrix quantize_codes(const Matrix& w, const QuantParams& params) {
  if (w.cols() != params.groups()) {
    throw DimensionError("quantize: " + std::to_string(w.cols()) + " columns but " +
                         std::to_string(params.groups()) + " quantization groups");
  }
  const double hi = static_cast<double>(params.max_code());
  CodeMatrix q(w.rows(), w.cols());
  for (Index j = 0; j < w.cols(); ++j) {
    const double s = params.scales[static_cast<std::size_t>(j)];
    const double z = static_cast<double>(params.zeros[static_cast<std::size_t>(j)]);
    for (Index i = 0; i < w.rows(); ++i) {
      q(i, j) = static_cast<std::uint16_t>(std::clamp(std::nearbyint(w(i, j) / s) + z, 0.0, hi));
    }
  }
  return q;
}

QuantizedWeights quantize(const Matrix& w, int bits) {
  QuantizedWeights qw;
  qw.params = calibrate_quantization(w, bits);
  qw.codes = quantize_codes(w, qw.params);
  return qw;
}

Matrix dequantize(const CodeMatrix& codes, const QuantParams& params) {
  if (codes.cols() != params.groups()) throw DimensionError("dequantize: group count mismatch");
  Matrix w(codes.rows(), codes.cols());
  for (Index j = 0; j < codes.cols(); ++j) {
    const double s = params.scales[static_cast<std::size_t>(j)];
    const auto z = params.zeros[static_cast<std::size_t>(j)];
    for (Index i = 0; i < codes.rows(); ++i) {
      w(i, j) = s * static_cast<double>(static_cast<std::int64_t>(codes(i, j)) - z);
    }
  }
  return w;
}

Tensor fake_quantize(const Tensor& w, const QuantParams& params) {
  if (w.cols() != params.groups()) throw DimensionError("fake_quantize: group count mismatch");
  const double hi = static_cast<double>(params.max_code());
  const Matrix& x = w.value();
  Matrix out(x.rows(), x.cols());
  Matrix pass(x.rows(), x.cols());
  for (Index j = 0; j < x.cols(); ++j) {
    const double s = params.scales[static_cast<std::size_t>(j)];
    const double z = static_cast<double>(params.zeros[static_cast<std::size_t>(j)]);
    for (Index i = 0; i < x.rows(); ++i) {
      const double u = std::nearbyint(x(i, j) / s) + z;
      const double q = std::clamp(u, 0.0, hi);
      out(i, j) = s * (q - z);
      pass(i, j) = (u >= 0.0 && u <= hi) ? 1.0 : 0.0;
    }
  }
  const Tensor in[] = {w};
  return make_result("fake_quantize", w.shape(), std::move(out), in,
                     [w, pass](const Matrix& g) { w.accumulate_grad(g.cwiseProduct(pass)); });
}

}  // namespace elsa
