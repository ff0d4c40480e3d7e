#include "elsa/metrics.hpp"

#include "elsa/error.hpp"
#include "elsa/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace elsa {

ParamCount count_params(const TinyTransformer& model) {
  ParamCount c;
  const auto add = [&c](const Matrix& m) {
    c.total += static_cast<std::int64_t>(m.size());
    c.nonzero += static_cast<std::int64_t>((m.array() != 0.0).count());
  };
  for (const Tensor& t : model.base_tensors()) add(t.value());
  for (const Tensor& t : model.adapter_tensors()) add(t.value());
  return c;
}

double relative_score(double candidate, double baseline) {
  if (baseline == 0.0) throw ValueError("relative_score: baseline is zero");
  return 100.0 * candidate / baseline;
}

LatencyResult bench_latency(const TinyTransformer& model, const TokenBatch& batch, std::size_t repeats,
                            const SubnetGenome* genome) {
  if (repeats < 5) throw ValueError("bench_latency: repeats must be at least 5, got " + std::to_string(repeats));
  NoTapeScope no_tape;
  const ModelActivation act = resolve_activation(model, genome);
  for (int i = 0; i < 2; ++i) forward(model, batch, act);
  LatencyResult r;
  for (std::size_t i = 0; i < repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    const Tensor out = forward(model, batch, act);
    const auto t1 = std::chrono::steady_clock::now();
    r.samples.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  std::vector<double> sorted = r.samples;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  r.median_seconds = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  return r;
}

double speedup(double baseline_seconds, double candidate_seconds) {
  if (candidate_seconds <= 0.0) throw ValueError("speedup: candidate latency must be positive");
  return baseline_seconds / candidate_seconds;
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double rank_correlation(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw DimensionError("rank_correlation: need two equal-length series");
  const std::vector<double> ra = average_ranks(a), rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

EfficiencyReport efficiency_report(const std::string& name, const TinyTransformer& model, const Split& val,
                                   double baseline_score, std::size_t latency_repeats) {
  EfficiencyReport r;
  r.name = name;
  const ParamCount p = count_params(model);
  r.total_params = p.total;
  r.nonzero_params = p.nonzero;
  r.macs = cost(model, nullptr, val.seq_len).macs;
  r.score = evaluate(model, val).accuracy;
  r.relative_score = relative_score(r.score, baseline_score);
  if (latency_repeats > 0) {
    const TokenBatch batch = val.range(0, std::min<Index>(64, val.size()));
    r.median_latency = bench_latency(model, batch, latency_repeats).median_seconds;
  }
  return r;
}

std::string render_table(const std::vector<EfficiencyReport>& rows, TableFormat format) {
  std::ostringstream os;
  const auto fixed = [](double v, int digits) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(digits) << v;
    return s.str();
  };
  const char* header[] = {"Model", "Total Params", "Non-zero Params", "MACs", "Latency (ms)", "Score",
                          "Relative Score"};
  if (format == TableFormat::markdown) {
    os << '|';
    for (const char* h : header) os << ' ' << h << " |";
    os << "\n|";
    for (std::size_t i = 0; i < std::size(header); ++i) os << (i == 0 ? " --- |" : " ---: |");
    os << '\n';
    for (const EfficiencyReport& r : rows) {
      os << "| " << r.name << " | " << r.total_params << " | " << r.nonzero_params << " | " << r.macs << " | "
         << fixed(r.median_latency * 1e3, 3) << " | " << fixed(100.0 * r.score, 1) << " | "
         << fixed(r.relative_score, 1) << "% |\n";
    }
  } else {
    os << "model,total_params,nonzero_params,macs,latency_ms,score,relative_score\n";
    for (const EfficiencyReport& r : rows) {
      os << r.name << ',' << r.total_params << ',' << r.nonzero_params << ',' << r.macs << ','
         << fixed(r.median_latency * 1e3, 6) << ',' << fixed(r.score, 6) << ',' << fixed(r.relative_score, 4)
         << '\n';
    }
  }
  return os.str();
}

}  // namespace elsa
