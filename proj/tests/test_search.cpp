#include "helpers.hpp"
#include "oracles.hpp"

#include "elsa/error.hpp"
#include "elsa/search.hpp"

#include <doctest.h>

#include <algorithm>
#include <set>
#include <sstream>

using namespace elsa;
using namespace testing_support;

namespace {

SupernetConfig toy_space(std::size_t layers, std::vector<Index> ranks, std::vector<Index> widths = {}) {
  SupernetConfig cfg;
  for (std::size_t i = 0; i < layers; ++i) cfg.layers.push_back({"l" + std::to_string(i), ranks, widths.empty() ? "" : "g"});
  if (!widths.empty()) cfg.groups.push_back({"g", widths});
  return cfg;
}

/// Deterministic synthetic trade-off: bigger choices cost more and mostly
/// score better, with a hashed wobble so the front is not trivial.
Evaluator toy_evaluator() {
  return [](const SubnetGenome& g) {
    double size = 0.0, wobble = 0.0;
    for (std::size_t i = 0; i < g.choices.size(); ++i) {
      size += (1.0 + static_cast<double>(i)) * g.choices[i];
      wobble += std::sin(3.7 * static_cast<double>(g.choices[i]) + 1.3 * static_cast<double>(i));
    }
    Fitness f;
    f.accuracy = std::tanh(0.3 * size) + 0.05 * wobble;
    f.cost.macs = 100 + static_cast<std::int64_t>(size * 10);
    f.objectives = {-f.accuracy, static_cast<double>(f.cost.macs)};
    return f;
  };
}

std::set<SubnetGenome> genomes_of(const std::vector<Individual>& inds) {
  std::set<SubnetGenome> out;
  for (const auto& i : inds) out.insert(i.genome);
  return out;
}

/// Exact 2-D dominated area by coordinate compression.
double hypervolume_oracle(const std::vector<Objectives>& pts, const Objectives& ref) {
  std::vector<double> xs{ref[0]}, ys{ref[1]};
  for (const auto& p : pts) {
    xs.push_back(p[0]);
    ys.push_back(p[1]);
  }
  std::sort(xs.begin(), xs.end());
  std::sort(ys.begin(), ys.end());
  double area = 0.0;
  for (std::size_t i = 0; i + 1 < xs.size(); ++i)
    for (std::size_t j = 0; j + 1 < ys.size(); ++j) {
      const double cx = 0.5 * (xs[i] + xs[i + 1]), cy = 0.5 * (ys[j] + ys[j + 1]);
      if (cx >= ref[0] || cy >= ref[1]) continue;
      const bool covered = std::any_of(pts.begin(), pts.end(), [&](const Objectives& p) { return p[0] <= cx && p[1] <= cy; });
      if (covered) area += (xs[i + 1] - xs[i]) * (ys[j + 1] - ys[j]);
    }
  return area;
}

}  // namespace

TEST_SUITE("search") {
  TEST_CASE("linear cost by hand") {
    CHECK(linear_cost(8, 8, 2, 1).params == 96);
    CHECK(linear_cost(8, 8, 0, 4).macs == 256);
    CHECK(linear_cost(8, 8, 2, 4).macs == 256 + 128);
  }

  TEST_CASE("model cost matches the closed-form carrier count") {
    TinyTransformer model = carrier(1);
    RngStream rng(1, streams::kAdapterInit);
    attach_adapters(model, mode_b_spec(), rng);
    RngStream grng(2, 0);
    for (int trial = 0; trial < 50; ++trial) {
      const SubnetGenome g = sample_genome(model.space, grng);
      oracle::CarrierShape s{64, 32, 16, 8, 8, {}, {}, {}};
      for (Index b = 0; b < 2; ++b) {
        s.heads.push_back(*model.space.width_for(g, head_group(b)) / 8);
        s.mlp.push_back(*model.space.width_for(g, mlp_group(b)));
        std::vector<Index> r;
        for (const char* p : {"q", "k", "v", "o", "up", "down"}) r.push_back(model.space.rank_for(g, layer_name(b, p)).value_or(0));
        s.ranks.push_back(r);
      }
      const Cost c = cost(model, &g, 8);
      CHECK(c.params == oracle::carrier_params(s));
      CHECK(c.macs == oracle::carrier_macs(s));
    }
  }

  TEST_CASE("nondominated sort by hand") {
    const std::vector<Objectives> pts = {{1, 5}, {2, 3}, {3, 4}, {4, 1}, {5, 5}};
    const auto fronts = nondominated_sort(pts);
    REQUIRE(fronts.size() == 3);
    CHECK(fronts[0] == std::vector<std::size_t>{0, 1, 3});
    CHECK(fronts[1] == std::vector<std::size_t>{2});
    CHECK(fronts[2] == std::vector<std::size_t>{4});
    CHECK(nondominated_sort({{2, 2}, {2, 2}}).size() == 1);
    CHECK(nondominated_sort({{7, 1}}).front() == std::vector<std::size_t>{0});
  }

  TEST_CASE("crowding distance by hand") {
    const auto d = crowding_distance({{1, 5}, {2, 3}, {4, 1}});
    CHECK(std::isinf(d[0]));
    CHECK(std::isinf(d[2]));
    CHECK(d[1] == doctest::Approx(2.0));
    const auto two = crowding_distance({{0, 1}, {1, 0}});
    CHECK((std::isinf(two[0]) && std::isinf(two[1])));
    const auto same = crowding_distance({{3, 3}, {3, 3}, {3, 3}});
    CHECK(same[1] == 0.0);
  }

  TEST_CASE("domination is a strict partial order and fronts partition the points") {
    RngStream rng(3, 0);
    for (int trial = 0; trial < 30; ++trial) {
      std::vector<Objectives> pts;
      const int n = 5 + static_cast<int>(rng.uniform_int(25));
      for (int i = 0; i < n; ++i) pts.push_back({static_cast<double>(rng.uniform_int(6)), static_cast<double>(rng.uniform_int(6))});
      for (const auto& a : pts) {
        CHECK_FALSE(dominates(a, a));
        for (const auto& b : pts) {
          if (dominates(a, b)) CHECK_FALSE(dominates(b, a));
          for (const auto& c : pts)
            if (dominates(a, b) && dominates(b, c)) CHECK(dominates(a, c));
        }
      }
      const auto fronts = nondominated_sort(pts);
      std::vector<int> seen(pts.size(), 0);
      for (std::size_t f = 0; f < fronts.size(); ++f)
        for (std::size_t i : fronts[f]) {
          ++seen[i];
          for (std::size_t j : fronts[f]) CHECK_FALSE(dominates(pts[i], pts[j]));
          if (f > 0) {
            const bool beaten = std::any_of(fronts[f - 1].begin(), fronts[f - 1].end(),
                                            [&](std::size_t k) { return dominates(pts[k], pts[i]); });
            CHECK(beaten);
          }
        }
      CHECK(std::all_of(seen.begin(), seen.end(), [](int s) { return s == 1; }));
    }
  }

  TEST_CASE("hypervolume matches the grid oracle") {
    RngStream rng(4, 0);
    CHECK(hypervolume_2d({{1, 1}}, {3, 3}) == 4.0);
    CHECK(hypervolume_2d({}, {3, 3}) == 0.0);
    for (int trial = 0; trial < 30; ++trial) {
      std::vector<Objectives> pts;
      for (int i = 0; i < 8; ++i) pts.push_back({rng.uniform() * 10, rng.uniform() * 10});
      CHECK(hypervolume_2d(pts, {9, 9}) == doctest::Approx(hypervolume_oracle(pts, {9, 9})).epsilon(1e-12));
    }
  }

  TEST_CASE("zero generations leave the archive unchanged") {
    const SupernetConfig space = toy_space(3, {2, 4, 8});
    SearchConfig cfg;
    cfg.population = 8;
    cfg.generations = 0;
    EvaluationCache cache;
    const ParetoArchive a = initialize_archive(space, toy_evaluator(), cfg, cache);
    const ParetoArchive b = evolve(a, space, toy_evaluator(), cfg, cache);
    CHECK(genomes_of(a.population) == genomes_of(b.population));
    CHECK(b.generation == a.generation);
    CHECK(a.population.size() == 8);
  }

  TEST_CASE("evolution on an enumerable space finds the exact front") {
    const SupernetConfig space = toy_space(2, {2, 4, 8}, {16, 32});
    REQUIRE(space.space_size() == 18);
    const auto truth = brute_force_pareto(space, toy_evaluator());
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      SearchConfig cfg;
      cfg.population = 12;
      cfg.generations = 25;
      cfg.seed = seed;
      EvaluationCache cache;
      ParetoArchive a = initialize_archive(space, toy_evaluator(), cfg, cache);
      a = evolve(a, space, toy_evaluator(), cfg, cache);
      CHECK(genomes_of(first_front(a.population)) == genomes_of(truth));
    }
  }

  TEST_CASE("front hypervolume never decreases across generations") {
    const SupernetConfig space = toy_space(5, {1, 2, 3, 4});
    SearchConfig cfg;
    cfg.population = 10;
    cfg.generations = 15;
    cfg.seed = 7;
    EvaluationCache cache;
    ParetoArchive a = initialize_archive(space, toy_evaluator(), cfg, cache);
    a = evolve(a, space, toy_evaluator(), cfg, cache);
    REQUIRE(a.history.size() == 16);
    const Objectives ref{1.0, 1000.0};
    double prev = -1.0;
    for (const auto& rec : a.history) {
      std::vector<Objectives> pts;
      for (const auto& ind : first_front(rec.population)) pts.push_back(ind.fitness.objectives);
      for (const auto& p : pts)
        for (const auto& q : pts) CHECK_FALSE(dominates(p, q));
      const double hv = hypervolume_2d(pts, ref);
      CHECK(hv >= prev);
      prev = hv;
    }
  }

  TEST_CASE("results do not depend on the thread count") {
    const SupernetConfig space = toy_space(6, {1, 2, 3});
    const auto run = [&](unsigned threads) {
      SearchConfig cfg;
      cfg.population = 14;
      cfg.generations = 8;
      cfg.threads = threads;
      cfg.seed = 11;
      EvaluationCache cache;
      ParetoArchive a = initialize_archive(space, toy_evaluator(), cfg, cache);
      a = evolve(a, space, toy_evaluator(), cfg, cache);
      std::ostringstream os;
      write_generations_csv(os, a);
      return os.str();
    };
    const std::string one = run(1);
    CHECK(one == run(4));
    CHECK(one == run(3));
  }

  TEST_CASE("failing evaluations are excluded and logged") {
    const SupernetConfig space = toy_space(2, {1, 2, 3});
    const Evaluator base = toy_evaluator();
    const Evaluator flaky = [&](const SubnetGenome& g) {
      if (g.choices[0] == 1) throw ValueError("boom");
      return base(g);
    };
    EvaluationCache cache;
    std::vector<SubnetGenome> all;
    for (std::uint64_t i = 0; i < space.space_size(); ++i) all.push_back(genome_at(space, i));
    cache.evaluate(all, flaky, 2);
    CHECK(cache.size() == 9);
    CHECK(cache.feasible().size() == 6);
    CHECK(cache.infeasible_log().size() == 3);
    CHECK_FALSE(cache.get(SubnetGenome{{1, 0}}));
    cache.evaluate(all, flaky, 1);
    CHECK(cache.evaluations() == 9);
  }

  TEST_CASE("brute force handles trivial spaces and refuses large ones") {
    const SupernetConfig one = toy_space(2, {4});
    CHECK(brute_force_pareto(one, toy_evaluator()).size() == 1);
    const Evaluator dominant = [](const SubnetGenome& g) {
      Fitness f;
      const bool best = g.choices[0] == 1 && g.choices[1] == 0;
      f.objectives = {best ? 0.0 : 1.0 + g.choices[0], best ? 0.0 : 1.0 + g.choices[1]};
      return f;
    };
    const auto single = brute_force_pareto(toy_space(2, {1, 2, 3}), dominant);
    REQUIRE(single.size() == 1);
    CHECK(single[0].genome == SubnetGenome{{1, 0}});
    CHECK_THROWS_AS(brute_force_pareto(toy_space(9, {1, 2, 3}), toy_evaluator()), SearchSpaceError);
  }

  TEST_CASE("csv and svg outputs carry the front and midpoint") {
    const SupernetConfig space = toy_space(2, {1, 2, 3});
    const auto front = brute_force_pareto(space, toy_evaluator());
    std::ostringstream csv, svg;
    write_front_csv(csv, front);
    const std::string text = csv.str();
    CHECK(std::count(text.begin(), text.end(), '\n') == static_cast<long>(front.size()) + 1);
    Individual mid;
    mid.genome = heuristic_midpoint(space);
    mid.fitness = toy_evaluator()(mid.genome);
    write_front_svg(svg, front, front, mid);
    CHECK(svg.str().find("<svg") != std::string::npos);
    CHECK(svg.str().find("midpoint") != std::string::npos);
  }
}
