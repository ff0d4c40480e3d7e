#pragma once

#include "elsa/search.hpp"
#include "elsa/task.hpp"
#include "elsa/transformer.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace elsa {

struct ParamCount {
  std::int64_t total = 0;
  std::int64_t nonzero = 0;
};

/// Every stored parameter: embeddings, norms, linear weights, head and
/// adapter factors. Exact integer counts.
ParamCount count_params(const TinyTransformer& model);

/// 100 · candidate / baseline. Throws ValueError for a zero baseline.
double relative_score(double candidate, double baseline);

struct LatencyResult {
  double median_seconds = 0.0;
  std::vector<double> samples;
};

/// Median wall-clock of `repeats` forwards after 2 warmups, on the calling
/// thread. Requires repeats >= 5.
LatencyResult bench_latency(const TinyTransformer& model, const TokenBatch& batch, std::size_t repeats,
                            const SubnetGenome* genome = nullptr);

/// Baseline latency over candidate latency.
double speedup(double baseline_seconds, double candidate_seconds);

/// Spearman rank correlation with average ranks for ties.
double rank_correlation(const std::vector<double>& a, const std::vector<double>& b);

struct EfficiencyReport {
  std::string name;
  std::int64_t total_params = 0;
  std::int64_t nonzero_params = 0;
  std::int64_t macs = 0;
  double median_latency = 0.0;
  double score = 0.0;
  /// Percent of the baseline row's score.
  double relative_score = 100.0;
};

/// Table row for a model at its full activation (extract sub-networks first).
/// Latency is measured only when `latency_repeats` > 0.
EfficiencyReport efficiency_report(const std::string& name, const TinyTransformer& model, const Split& val,
                                   double baseline_score, std::size_t latency_repeats);

enum class TableFormat { markdown, csv };

/// Rows in the order given: name, total params, nonzero params, MACs,
/// latency (ms), score, relative score.
std::string render_table(const std::vector<EfficiencyReport>& rows, TableFormat format);

}  // namespace elsa
