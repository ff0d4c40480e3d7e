#include "elsa/search.hpp"

#include "elsa/error.hpp"
#include "elsa/rng.hpp"
#include "elsa/training.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

namespace elsa {

Cost linear_cost(Index m, Index n, Index rank, Index tokens) {
  Cost c;
  c.params = static_cast<std::int64_t>(m * n + rank * (m + n));
  c.macs = static_cast<std::int64_t>(tokens * m * n + tokens * rank * (m + n));
  return c;
}

Cost cost(const TinyTransformer& model, const SubnetGenome* genome, Index tokens) {
  const ModelActivation act = resolve_activation(model, genome);
  const Index d = model.dims.width;
  const Index v = model.dims.vocab;
  Cost total;
  const auto add_linear = [&](const LinearActivation& a) {
    const Cost c = linear_cost(a.in, a.out, a.rank, tokens);
    total.params += c.params;
    total.macs += c.macs;
  };
  total.params += static_cast<std::int64_t>(v * d + model.dims.max_seq * d);
  for (const BlockActivation& b : act.blocks) {
    total.params += static_cast<std::int64_t>(4 * d);
    for (const LinearActivation* a : {&b.q, &b.k, &b.v, &b.o, &b.up, &b.down}) add_linear(*a);
    total.macs += static_cast<std::int64_t>(tokens * tokens * b.heads * model.head_dim);
  }
  total.params += static_cast<std::int64_t>(2 * d);
  add_linear({0, d, v});
  return total;
}

bool dominates(const Objectives& a, const Objectives& b) {
  if (a.size() != b.size()) throw DimensionError("dominates: objective vectors differ in length");
  bool strictly = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] > b[i]) return false;
    if (a[i] < b[i]) strictly = true;
  }
  return strictly;
}

std::vector<std::vector<std::size_t>> nondominated_sort(const std::vector<Objectives>& points) {
  const std::size_t n = points.size();
  for (const Objectives& p : points) {
    if (p.size() != points.front().size()) throw DimensionError("nondominated_sort: objective vectors differ in length");
  }
  std::vector<std::vector<std::size_t>> dominated(n);
  std::vector<std::size_t> count(n, 0);
  std::vector<std::vector<std::size_t>> fronts;
  std::vector<std::size_t> current;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      if (dominates(points[i], points[j])) {
        dominated[i].push_back(j);
      } else if (dominates(points[j], points[i])) {
        ++count[i];
      }
    }
    if (count[i] == 0) current.push_back(i);
  }
  while (!current.empty()) {
    std::vector<std::size_t> next;
    for (std::size_t i : current) {
      for (std::size_t j : dominated[i]) {
        if (--count[j] == 0) next.push_back(j);
      }
    }
    std::sort(next.begin(), next.end());
    fronts.push_back(std::move(current));
    current = std::move(next);
  }
  return fronts;
}

std::vector<double> crowding_distance(const std::vector<Objectives>& front) {
  const std::size_t n = front.size();
  std::vector<double> dist(n, 0.0);
  if (n == 0) return dist;
  if (n <= 2) {
    std::fill(dist.begin(), dist.end(), std::numeric_limits<double>::infinity());
    return dist;
  }
  const std::size_t m = front.front().size();
  std::vector<std::size_t> order(n);
  for (std::size_t k = 0; k < m; ++k) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return front[a][k] < front[b][k]; });
    const double lo = front[order.front()][k];
    const double hi = front[order.back()][k];
    dist[order.front()] = std::numeric_limits<double>::infinity();
    dist[order.back()] = std::numeric_limits<double>::infinity();
    const double range = hi - lo;
    if (range <= 0.0) continue;
    for (std::size_t i = 1; i + 1 < n; ++i) {
      dist[order[i]] += (front[order[i + 1]][k] - front[order[i - 1]][k]) / range;
    }
  }
  return dist;
}

double hypervolume_2d(const std::vector<Objectives>& points, const Objectives& reference) {
  if (reference.size() != 2) throw DimensionError("hypervolume_2d: reference must have 2 objectives");
  std::vector<std::pair<double, double>> pts;
  for (const Objectives& p : points) {
    if (p.size() != 2) throw DimensionError("hypervolume_2d: points must have 2 objectives");
    if (p[0] < reference[0] && p[1] < reference[1]) pts.emplace_back(p[0], p[1]);
  }
  std::sort(pts.begin(), pts.end());
  double volume = 0.0;
  double best_y = reference[1];
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (pts[i].second >= best_y) continue;
    // Sweep in x: each improving point adds a strip up to the previous best y.
    volume += (reference[0] - pts[i].first) * (best_y - pts[i].second);
    best_y = pts[i].second;
  }
  return volume;
}

void EvaluationCache::evaluate(const std::vector<SubnetGenome>& genomes, const Evaluator& evaluator,
                               unsigned threads) {
  std::vector<SubnetGenome> todo;
  std::set<SubnetGenome> seen;
  for (const SubnetGenome& g : genomes) {
    if (entries_.count(g) || !seen.insert(g).second) continue;
    todo.push_back(g);
  }
  if (todo.empty()) return;
  std::vector<std::optional<Fitness>> results(todo.size());
  std::vector<std::string> errors(todo.size());
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t i = next++; i < todo.size(); i = next++) {
      try {
        Fitness f = evaluator(todo[i]);
        bool finite = true;
        for (double o : f.objectives) finite = finite && std::isfinite(o);
        if (finite) {
          results[i] = std::move(f);
        } else {
          errors[i] = "non-finite objectives";
        }
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  const unsigned n_threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(todo.size())));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }
  for (std::size_t i = 0; i < todo.size(); ++i) {
    if (!results[i]) infeasible_log_.push_back(todo[i].key() + ": " + errors[i]);
    entries_.emplace(todo[i], std::move(results[i]));
  }
  evaluations_ += todo.size();
}

std::optional<Fitness> EvaluationCache::get(const SubnetGenome& g) const {
  auto it = entries_.find(g);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

std::vector<Individual> EvaluationCache::feasible() const {
  std::vector<Individual> out;
  for (const auto& [g, f] : entries_) {
    if (f) out.push_back({g, *f, 1, 0.0});
  }
  return out;
}

namespace {

std::vector<Objectives> objectives_of(const std::vector<Individual>& pop) {
  std::vector<Objectives> out;
  out.reserve(pop.size());
  for (const Individual& ind : pop) out.push_back(ind.fitness.objectives);
  return out;
}

// Assigns front ranks and crowding distances in place.
void rank_population(std::vector<Individual>& pop) {
  const auto fronts = nondominated_sort(objectives_of(pop));
  for (std::size_t f = 0; f < fronts.size(); ++f) {
    std::vector<Objectives> pts;
    for (std::size_t i : fronts[f]) pts.push_back(pop[i].fitness.objectives);
    const std::vector<double> cd = crowding_distance(pts);
    for (std::size_t j = 0; j < fronts[f].size(); ++j) {
      pop[fronts[f][j]].front_rank = static_cast<int>(f + 1);
      pop[fronts[f][j]].crowding = cd[j];
    }
  }
}

// Elitist truncation: whole fronts while they fit, then the most spread-out
// members of the first front that does not. Ties keep genome order.
std::vector<Individual> select_survivors(std::vector<Individual> pool, std::size_t size) {
  std::sort(pool.begin(), pool.end(),
            [](const Individual& a, const Individual& b) { return a.genome < b.genome; });
  const auto fronts = nondominated_sort(objectives_of(pool));
  std::vector<Individual> next;
  for (const auto& front : fronts) {
    if (next.size() >= size) break;
    std::vector<Objectives> pts;
    for (std::size_t i : front) pts.push_back(pool[i].fitness.objectives);
    const std::vector<double> cd = crowding_distance(pts);
    std::vector<std::size_t> order(front.size());
    std::iota(order.begin(), order.end(), 0);
    if (next.size() + front.size() > size) {
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return cd[a] > cd[b]; });
    }
    for (std::size_t j : order) {
      if (next.size() >= size) break;
      next.push_back(pool[front[j]]);
    }
  }
  rank_population(next);
  return next;
}

bool better(const Individual& a, const Individual& b) {
  if (a.front_rank != b.front_rank) return a.front_rank < b.front_rank;
  return a.crowding > b.crowding;
}

const Individual& tournament(const std::vector<Individual>& pop, RngStream& rng) {
  const Individual& a = pop[rng.uniform_int(pop.size())];
  const Individual& b = pop[rng.uniform_int(pop.size())];
  return better(b, a) ? b : a;
}

void mutate(SubnetGenome& g, const std::vector<std::size_t>& counts, double p, RngStream& rng) {
  for (std::size_t i = 0; i < g.choices.size(); ++i) {
    if (rng.uniform() >= p || counts[i] < 2) continue;
    // Resample among the other choices so that a mutation always changes the gene.
    const auto r = static_cast<std::uint32_t>(rng.uniform_int(counts[i] - 1));
    g.choices[i] = r >= g.choices[i] ? r + 1 : r;
  }
}

std::vector<Individual> collect(const std::vector<SubnetGenome>& genomes, const EvaluationCache& cache) {
  std::vector<Individual> out;
  std::set<SubnetGenome> seen;
  for (const SubnetGenome& g : genomes) {
    if (!seen.insert(g).second) continue;
    if (auto f = cache.get(g)) out.push_back({g, *f, 1, 0.0});
  }
  return out;
}

}  // namespace

ParetoArchive initialize_archive(const SupernetConfig& space, const Evaluator& evaluator,
                                 const SearchConfig& cfg, EvaluationCache& cache) {
  if (cfg.population == 0) throw ConfigurationError("search: population must be positive");
  space.validate();
  RngStream rng = RngStream(cfg.seed, streams::kSearch).split(0);
  const std::uint64_t size = space.space_size();
  const std::size_t target = static_cast<std::size_t>(std::min<std::uint64_t>(cfg.population, size));
  std::vector<SubnetGenome> genomes;
  std::set<SubnetGenome> seen;
  for (std::size_t attempt = 0; genomes.size() < target && attempt < 64 * target; ++attempt) {
    SubnetGenome g = sample_genome(space, rng);
    if (seen.insert(g).second) genomes.push_back(std::move(g));
  }
  cache.evaluate(genomes, evaluator, cfg.threads);
  ParetoArchive archive;
  archive.stream_id = streams::kSearch;
  archive.population = collect(genomes, cache);
  if (archive.population.empty()) throw SearchSpaceError("search: every initial genome was infeasible");
  rank_population(archive.population);
  archive.history.push_back({0, archive.population});
  return archive;
}

ParetoArchive evolve(const ParetoArchive& archive, const SupernetConfig& space, const Evaluator& evaluator,
                     const SearchConfig& cfg, EvaluationCache& cache) {
  ParetoArchive out = archive;
  if (out.population.empty()) return out;
  const std::vector<std::size_t> counts = space.choice_counts();
  const double pm = cfg.mutation_prob > 0.0 ? cfg.mutation_prob : 1.0 / static_cast<double>(counts.size());
  for (std::size_t step = 0; step < cfg.generations; ++step) {
    const std::size_t gen = out.generation + 1;
    const RngStream gen_rng = RngStream(cfg.seed, out.stream_id).split(gen);
    std::vector<SubnetGenome> children;
    for (std::size_t pair = 0; children.size() < cfg.population; ++pair) {
      RngStream rng = gen_rng.split(pair);
      SubnetGenome a = tournament(out.population, rng).genome;
      SubnetGenome b = tournament(out.population, rng).genome;
      if (rng.uniform() < cfg.crossover_prob) {
        for (std::size_t i = 0; i < a.choices.size(); ++i) {
          if (rng.uniform() < 0.5) std::swap(a.choices[i], b.choices[i]);
        }
      }
      mutate(a, counts, pm, rng);
      mutate(b, counts, pm, rng);
      children.push_back(std::move(a));
      if (children.size() < cfg.population) children.push_back(std::move(b));
    }
    cache.evaluate(children, evaluator, cfg.threads);
    std::vector<SubnetGenome> pool_genomes;
    for (const Individual& ind : out.population) pool_genomes.push_back(ind.genome);
    pool_genomes.insert(pool_genomes.end(), children.begin(), children.end());
    out.population = select_survivors(collect(pool_genomes, cache), cfg.population);
    out.generation = gen;
    out.history.push_back({gen, out.population});
  }
  return out;
}

std::vector<Individual> first_front(const std::vector<Individual>& population) {
  std::vector<Individual> out;
  for (const Individual& ind : population) {
    if (ind.front_rank == 1) out.push_back(ind);
  }
  std::sort(out.begin(), out.end(), [](const Individual& a, const Individual& b) { return a.genome < b.genome; });
  return out;
}

std::vector<Individual> brute_force_pareto(const SupernetConfig& space, const Evaluator& evaluator,
                                           std::uint64_t limit) {
  const std::uint64_t size = space.space_size();
  if (size > limit) {
    throw SearchSpaceError("brute_force_pareto: space has " + std::to_string(size) + " genomes, limit is " +
                           std::to_string(limit));
  }
  std::vector<Individual> all;
  for (std::uint64_t i = 0; i < size; ++i) {
    SubnetGenome g = genome_at(space, i);
    Fitness f = evaluator(g);
    all.push_back({std::move(g), std::move(f), 1, 0.0});
  }
  rank_population(all);
  return first_front(all);
}

Evaluator make_model_evaluator(const TinyTransformer& model, const Split& val, Index tokens) {
  return [&model, &val, tokens](const SubnetGenome& g) {
    const EvalResult r = evaluate(model, val, &g);
    Fitness f;
    f.accuracy = r.accuracy;
    f.cost = cost(model, &g, tokens);
    f.objectives = {-r.accuracy, static_cast<double>(f.cost.macs)};
    return f;
  };
}

namespace {

std::string fmt(double x) {
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os << std::setprecision(17) << x;
  return os.str();
}

void write_row(std::ostream& os, const Individual& ind) {
  os << ind.genome.key();
  for (double o : ind.fitness.objectives) os << ',' << fmt(o);
  os << ',' << fmt(ind.fitness.accuracy) << ',' << ind.fitness.cost.params << ',' << ind.fitness.cost.macs << ','
     << ind.front_rank << ',' << fmt(ind.crowding) << '\n';
}

}  // namespace

void write_generations_csv(std::ostream& os, const ParetoArchive& archive) {
  os << "generation,genome,neg_accuracy,macs_objective,accuracy,params,macs,front_rank,crowding\n";
  for (const GenerationRecord& rec : archive.history) {
    for (const Individual& ind : rec.population) {
      os << rec.generation << ',';
      write_row(os, ind);
    }
  }
}

void write_front_csv(std::ostream& os, const std::vector<Individual>& front) {
  os << "genome,neg_accuracy,macs_objective,accuracy,params,macs,front_rank,crowding\n";
  for (const Individual& ind : front) write_row(os, ind);
}

void write_front_svg(std::ostream& os, const std::vector<Individual>& evaluated,
                     const std::vector<Individual>& front, const Individual& midpoint) {
  constexpr double W = 640, H = 420, L = 70, R = 20, T = 20, B = 50;
  double x_lo = static_cast<double>(midpoint.fitness.cost.macs), x_hi = x_lo;
  double y_lo = midpoint.fitness.accuracy, y_hi = y_lo;
  for (const auto* set : {&evaluated, &front}) {
    for (const Individual& ind : *set) {
      x_lo = std::min(x_lo, static_cast<double>(ind.fitness.cost.macs));
      x_hi = std::max(x_hi, static_cast<double>(ind.fitness.cost.macs));
      y_lo = std::min(y_lo, ind.fitness.accuracy);
      y_hi = std::max(y_hi, ind.fitness.accuracy);
    }
  }
  if (x_hi <= x_lo) x_hi = x_lo + 1.0;
  if (y_hi <= y_lo) y_hi = y_lo + 0.01;
  const auto px = [&](double x) { return L + (x - x_lo) / (x_hi - x_lo) * (W - L - R); };
  const auto py = [&](double y) { return H - B - (y - y_lo) / (y_hi - y_lo) * (H - T - B); };
  const auto num = [](double v) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(2) << v;
    return s.str();
  };

  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  os << "<text x=\"" << (W + L) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\" font-size=\"12\">MACs ("
     << num(x_lo) << " - " << num(x_hi) << ")</text>\n";
  os << "<text x=\"16\" y=\"" << (H - B + T) / 2 << "\" font-size=\"12\" transform=\"rotate(-90 16 "
     << (H - B + T) / 2 << ")\" text-anchor=\"middle\">validation accuracy (" << num(y_lo) << " - " << num(y_hi)
     << ")</text>\n";
  for (const Individual& ind : evaluated) {
    os << "<circle cx=\"" << num(px(static_cast<double>(ind.fitness.cost.macs))) << "\" cy=\""
       << num(py(ind.fitness.accuracy)) << "\" r=\"3\" fill=\"#bbbbbb\"/>\n";
  }
  for (const Individual& ind : front) {
    os << "<circle cx=\"" << num(px(static_cast<double>(ind.fitness.cost.macs))) << "\" cy=\""
       << num(py(ind.fitness.accuracy)) << "\" r=\"4\" fill=\"#d62728\"><title>" << ind.genome.key()
       << "</title></circle>\n";
  }
  const double my = py(midpoint.fitness.accuracy);
  os << "<line x1=\"" << L << "\" y1=\"" << num(my) << "\" x2=\"" << W - R << "\" y2=\"" << num(my)
     << "\" stroke=\"#1f77b4\" stroke-dasharray=\"6 4\"/>\n";
  os << "<text x=\"" << W - R - 4 << "\" y=\"" << num(my - 4) << "\" text-anchor=\"end\" font-size=\"11\" "
     << "fill=\"#1f77b4\">midpoint " << midpoint.genome.key() << "</text>\n";
  os << "</svg>\n";
}

}  // namespace elsa
