#pragma once

#include "elsa/supernet.hpp"
#include "elsa/task.hpp"
#include "elsa/transformer.hpp"

#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace elsa {

// ---- cost model -------------------------------------------------------------

struct Cost {
  std::int64_t params = 0;
  std::int64_t macs = 0;
  bool operator==(const Cost&) const = default;
};

/// Parameters of W[m×n] plus a rank-r adapter; MACs for `tokens` rows.
Cost linear_cost(Index m, Index n, Index rank, Index tokens);

/// Analytic cost of the sub-network selected by `genome` (nullptr = max) for
/// one sequence of `tokens` tokens. Params cover every activated tensor
/// (embeddings, norms, weight slices, adapter slices); MACs cover each linear
/// (T·m·n), each adapter (T·r·(m+n)), the output head, and T²·d_active of
/// attention scores per block.
Cost cost(const TinyTransformer& model, const SubnetGenome* genome, Index tokens);

// ---- Pareto machinery -------------------------------------------------------

using Objectives = std::vector<double>;

/// a ≤ b in every objective and < in at least one (minimization).
bool dominates(const Objectives& a, const Objectives& b);

/// Fronts as index lists; front 0 is the non-dominated set.
std::vector<std::vector<std::size_t>> nondominated_sort(const std::vector<Objectives>& points);

/// Boundary members get +inf; interior members sum neighbor gaps normalized
/// by each objective's range (zero range contributes 0).
std::vector<double> crowding_distance(const std::vector<Objectives>& front);

/// Area dominated by a 2-objective point set and bounded by `reference`.
double hypervolume_2d(const std::vector<Objectives>& points, const Objectives& reference);

// ---- search -----------------------------------------------------------------

struct Fitness {
  Objectives objectives;
  double accuracy = 0.0;
  Cost cost;
};

using Evaluator = std::function<Fitness(const SubnetGenome&)>;

struct Individual {
  SubnetGenome genome;
  Fitness fitness;
  int front_rank = 1;
  double crowding = 0.0;
};

struct SearchConfig {
  std::size_t population = 50;
  std::size_t generations = 30;
  double crossover_prob = 0.9;
  /// Per-gene mutation probability; <= 0 means 1/genome_length.
  double mutation_prob = 0.0;
  unsigned threads = 1;
  std::uint64_t seed = 0;
};

/// Memoizes fitness by genome; evaluates misses concurrently with results
/// merged by index, so outcomes do not depend on scheduling.
class EvaluationCache {
 public:
  /// Evaluates every uncached genome in `genomes`. Failures are recorded as
  /// infeasible.
  void evaluate(const std::vector<SubnetGenome>& genomes, const Evaluator& evaluator, unsigned threads);
  /// nullopt for infeasible or unknown genomes.
  std::optional<Fitness> get(const SubnetGenome& g) const;
  bool contains(const SubnetGenome& g) const { return entries_.count(g) != 0; }
  std::size_t size() const { return entries_.size(); }
  /// Every feasible evaluation, in genome order.
  std::vector<Individual> feasible() const;
  std::size_t evaluations() const { return evaluations_; }
  const std::vector<std::string>& infeasible_log() const { return infeasible_log_; }

 private:
  std::map<SubnetGenome, std::optional<Fitness>> entries_;
  std::size_t evaluations_ = 0;
  std::vector<std::string> infeasible_log_;
};

struct GenerationRecord {
  std::size_t generation = 0;
  std::vector<Individual> population;
};

struct ParetoArchive {
  std::vector<Individual> population;
  std::size_t generation = 0;
  std::uint64_t stream_id = 0;
  std::vector<GenerationRecord> history;
};

/// Random unique initial population (generation 0).
ParetoArchive initialize_archive(const SupernetConfig& space, const Evaluator& evaluator,
                                 const SearchConfig& cfg, EvaluationCache& cache);

/// Runs cfg.generations NSGA-II generations: binary tournament on (rank,
/// crowding), uniform crossover, per-gene uniform mutation, and elitist
/// environmental selection over parents ∪ offspring (duplicates removed).
ParetoArchive evolve(const ParetoArchive& archive, const SupernetConfig& space, const Evaluator& evaluator,
                     const SearchConfig& cfg, EvaluationCache& cache);

/// Front-1 members of the archive's population.
std::vector<Individual> first_front(const std::vector<Individual>& population);

/// Exact Pareto set by enumeration. Refuses spaces larger than `limit`.
std::vector<Individual> brute_force_pareto(const SupernetConfig& space, const Evaluator& evaluator,
                                           std::uint64_t limit = 4096);

/// Objectives (-validation accuracy, MACs) of the supernet under each genome.
Evaluator make_model_evaluator(const TinyTransformer& model, const Split& val, Index tokens);

// ---- output -----------------------------------------------------------------

void write_generations_csv(std::ostream& os, const ParetoArchive& archive);
void write_front_csv(std::ostream& os, const std::vector<Individual>& front);
/// Accuracy vs MACs scatter of everything evaluated, with front 1 highlighted
/// and a horizontal reference line at the midpoint genome's accuracy.
void write_front_svg(std::ostream& os, const std::vector<Individual>& evaluated,
                     const std::vector<Individual>& front, const Individual& midpoint);

}  // namespace elsa
