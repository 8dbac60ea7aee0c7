// Copyright 2026 The Puzzle NAS Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <algorithm>
#include <cmath>
#include <numeric>

#include "common/mip_oracle.hpp"
#include "doctest.h"
#include "puzzle/common.hpp"
#include "puzzle/solver.hpp"

using namespace puzzle;
using namespace puzzle::testing;

TEST_CASE("linearized budgets") {
  MipProblem p = Problem({{V(0, 0, 1, 1)}});
  p.batch_size = 4;
  p.seq_len = 1024;
  p.limits.throughput_min = 2048;
  CHECK(LinearizeConstraints(p).runtime == 2.0);
  p.limits.latency_max = 1.5;
  CHECK(LinearizeConstraints(p).runtime == 1.5);
  CHECK(LinearizeConstraints(p).runtime_from_throughput == 2.0);
  p.limits = Limits{};
  CHECK(LinearizeConstraints(p).runtime == kUnlimited);
  CHECK(LinearizeConstraints(p).memory == kUnlimited);
}

TEST_CASE("linearization preserves the feasible set on a 3-layer instance") {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    MipProblem p = RandomProblem(rng, 1, 5, false);
    std::vector<std::vector<MipVariant>> menu;
    for (int l = 0; l < 3; ++l) {
      std::vector<MipVariant> g;
      for (int j = 0; j < 4; ++j) {
        g.push_back(V(j, j, 10 + UniformIndex(rng, 90), Uniform(rng, 0.1, 1.0), UniformIndex(rng, 5)));
      }
      menu.push_back(g);
    }
    p = Problem(menu);
    p.batch_size = 3;
    p.seq_len = 100;
    p.limits.memory_max = 150 + UniformIndex(rng, 150);
    p.limits.throughput_min = 300.0 / Uniform(rng, 0.5, 2.5);
    p.limits.latency_max = Uniform(rng, 0.5, 2.5);
    int agree = 0, feasible = 0;
    for (int a = 0; a < 4; ++a) {
      for (int b = 0; b < 4; ++b) {
        for (int c = 0; c < 4; ++c) {
          const std::vector<int> x = {a, b, c};
          const Totals t = ComputeTotals(p, x);
          const bool original = t.memory_bytes <= p.limits.memory_max &&
                                t.throughput >= p.limits.throughput_min &&
                                t.runtime_seconds <= p.limits.latency_max;
          agree += original == IsFeasible(p, x);
          feasible += original;
        }
      }
    }
    CHECK(agree == 64);
  }
}

TEST_CASE("single unconstrained layer picks the best score") {
  const MipProblem p = Problem({{V(0, 2, 0, 1), V(1, 5, 0, 10)}}, Polarity::kBenefit);
  const MipSolution s = SolveMip(p);
  REQUIRE(s.feasible);
  CHECK(s.choice == std::vector<int>{1});
  CHECK(s.objective == 5);
  CHECK(s.proved_optimal);
  CHECK(s.gap == 0.0);
}

TEST_CASE("two layers where only one expensive choice fits") {
  MipProblem p = Problem({{V(0, 1, 0, 1), V(1, 4, 0, 3)}, {V(0, 2, 0, 1), V(1, 3, 0, 3)}},
                         Polarity::kBenefit);
  p.limits.latency_max = 4.5;
  const MipSolution s = SolveMip(p);
  const Oracle o = Exhaustive(p);
  REQUIRE(s.feasible);
  CHECK(s.choice == o.choice);
  CHECK(s.choice == std::vector<int>{1, 0});
  CHECK(s.objective == 6);
}

TEST_CASE("solver matches exhaustive enumeration on 500 random instances") {
  Rng rng(2026);
  int feasible = 0, with_cuts = 0;
  for (int i = 0; i < 500; ++i) {
    const MipProblem p = RandomProblem(rng, 8, 6, true);
    const Oracle o = Exhaustive(p);
    const MipSolution s = SolveMip(p);
    REQUIRE_MESSAGE(s.feasible == o.feasible, "instance " << i);
    with_cuts += !p.previous.empty();
    if (!o.feasible) continue;
    ++feasible;
    const double sign = p.polarity == Polarity::kCost ? 1.0 : -1.0;
    CHECK_MESSAGE(sign * s.objective == o.cost, "instance " << i);
    CHECK_MESSAGE(s.choice == o.choice, "instance " << i);
    CHECK(s.proved_optimal);
    CHECK(IsFeasible(p, s.choice));
    const LinearBudgets b = LinearizeConstraints(p);
    CHECK(s.totals.memory_bytes <= b.memory * (1 + 1e-9));
    CHECK(s.totals.runtime_seconds <= b.runtime * (1 + 1e-9));
  }
  MESSAGE(feasible << " feasible, " << with_cuts << " with diversity cuts");
  CHECK(feasible > 200);
  CHECK(with_cuts > 50);
}

TEST_CASE("solver matches exhaustive enumeration with several diversity cuts") {
  Rng rng(77);
  int feasible = 0;
  for (int i = 0; i < 300; ++i) {
    MipProblem p = RandomProblem(rng, 8, 4, false);
    p.alpha = (1 + UniformIndex(rng, 3)) / 4.0;
    const int cuts = 2 + UniformIndex(rng, 3);
    for (int y = 0; y < cuts; ++y) {
      Architecture a;
      for (const MipGroup& g : p.groups) {
        const int j = UniformIndex(rng, static_cast<int>(g.variants.size()));
        a.choices.push_back({j, j});
      }
      p.previous.push_back(a);
    }
    const Oracle o = Exhaustive(p);
    const MipSolution s = SolveMip(p);
    REQUIRE_MESSAGE(s.feasible == o.feasible, "instance " << i);
    if (!o.feasible) continue;
    ++feasible;
    const double sign = p.polarity == Polarity::kCost ? 1.0 : -1.0;
    CHECK_MESSAGE(sign * s.objective == o.cost, "instance " << i);
    CHECK_MESSAGE(s.choice == o.choice, "instance " << i);
  }
  CHECK(feasible > 50);
}

TEST_CASE("branch-and-bound bound never exceeds the best completion") {
  Rng rng(77);
  long long audited = 0;
  for (int i = 0; i < 60; ++i) {
    const MipProblem p = RandomProblem(rng, 6, 5, true);
    SolveOptions opts;
    opts.record_bounds = 40;
    std::vector<BoundRecord> records;
    const MipSolution s = SolveMip(p, opts, &records);
    for (const BoundRecord& r : records) {
      const Oracle o = Exhaustive(p, r.prefix);
      if (!o.feasible) continue;
      ++audited;
      CHECK(r.bound <= o.cost + 1e-9 * (1 + std::abs(o.cost)));
    }
    if (s.feasible) {
      const double root = p.polarity == Polarity::kCost ? s.stats.root_bound : -s.stats.root_bound;
      const double opt = p.polarity == Polarity::kCost ? s.objective : -s.objective;
      CHECK(root <= opt + 1e-9 * (1 + std::abs(opt)));
    }
  }
  CHECK(audited > 100);
}

TEST_CASE("relaxing a budget never worsens the optimum") {
  Rng rng(9);
  for (int i = 0; i < 150; ++i) {
    const MipProblem p = RandomProblem(rng, 6, 5, false);
    const MipSolution base = SolveMip(p);
    for (int which = 0; which < 3; ++which) {
      MipProblem q = p;
      if (which == 0) q.limits.memory_max *= 1.5;
      if (which == 1) q.limits.latency_max *= 1.5;
      if (which == 2) q.limits.throughput_min /= 1.5;
      const MipSolution r = SolveMip(q);
      if (!base.feasible) continue;
      REQUIRE(r.feasible);
      if (p.polarity == Polarity::kCost) {
        CHECK(r.objective <= base.objective);
      } else {
        CHECK(r.objective >= base.objective);
      }
    }
  }
}

TEST_CASE("identical problems give identical solutions and statistics") {
  Rng rng(5);
  for (int i = 0; i < 20; ++i) {
    const MipProblem p = RandomProblem(rng, 7, 6, true);
    CHECK(SolveMip(p).ToJson().dump() == SolveMip(p).ToJson().dump());
  }
  const MipProblem p = RandomProblem(rng, 3, 3, false);
  CHECK_FALSE(SolveMip(p).ToJson().contains("wall_seconds"));
  CHECK(SolveMip(p).ToJson(true)["statistics"].contains("wall_seconds"));
}

TEST_CASE("dominance and Lagrangian pruning do not change the answer") {
  Rng rng(31);
  for (int i = 0; i < 100; ++i) {
    const MipProblem p = RandomProblem(rng, 7, 6, true);
    SolveOptions plain;
    plain.use_dominance = false;
    plain.use_lagrangian = false;
    const MipSolution a = SolveMip(p), b = SolveMip(p, plain);
    REQUIRE(a.feasible == b.feasible);
    if (a.feasible) {
      CHECK(a.choice == b.choice);
      CHECK(a.stats.nodes <= b.stats.nodes);
    }
  }
}

TEST_CASE("diversity cuts") {
  Rng rng(12);
  SUBCASE("alpha 0.8 over 80 layers forces 16 differing layers") {
    std::vector<std::vector<MipVariant>> menu(80);
    for (auto& g : menu) {
      for (int j = 0; j < 3; ++j) g.push_back(V(j, Uniform(rng, 0, 1), 1, 0.1));
    }
    MipProblem p = Problem(menu);
    p.alpha = 0.8;
    CHECK(p.MaxSharedGroups() == 64);
    const std::vector<MipSolution> sols = SolveDiverse(p, 3);
    REQUIRE(sols.size() == 3);
    for (std::size_t i = 0; i < sols.size(); ++i) {
      REQUIRE(sols[i].feasible);
      CHECK(sols[i].proved_optimal);
      for (std::size_t k = 0; k < i; ++k) {
        CHECK(80 - SharedGroups(p, sols[i].choice, sols[k].architecture) >= 16);
      }
    }
    CHECK(sols[1].objective >= sols[0].objective);
  }
  SUBCASE("alpha 1 never binds") {
    MipProblem p = RandomProblem(rng, 5, 4, false);
    p.alpha = 1.0;
    const std::vector<MipSolution> sols = SolveDiverse(p, 2);
    if (sols[0].feasible) {
      REQUIRE(sols.size() == 2);
      CHECK(sols[1].choice == sols[0].choice);
    }
  }
  SUBCASE("alpha 0 shares no layer with the first solution") {
    std::vector<std::vector<MipVariant>> menu(4);
    for (auto& g : menu) {
      for (int j = 0; j < 4; ++j) g.push_back(V(j, Uniform(rng, 0, 1), 1, 0.1));
    }
    MipProblem p = Problem(menu);
    p.alpha = 0.0;
    const std::vector<MipSolution> sols = SolveDiverse(p, 2);
    REQUIRE(sols.size() == 2);
    for (int l = 0; l < 4; ++l) {
      CHECK(sols[1].architecture.choices[l] != sols[0].architecture.choices[l]);
    }
  }
  SUBCASE("negative alpha is rejected") {
    MipProblem p = Problem({{V(0, 0, 1, 1)}});
    p.alpha = -0.1;
    CHECK_THROWS_AS(SolveMip(p), Error);
  }
}

TEST_CASE("infeasibility reports name the binding constraint") {
  MipProblem p = Problem({{V(0, 0, 100, 1), V(1, 1, 50, 2)}, {V(0, 0, 100, 1)}});
  p.limits.memory_max = 120;
  MipSolution s = SolveMip(p);
  CHECK_FALSE(s.feasible);
  CHECK(s.infeasibility.binding == "memory");
  CHECK(s.infeasibility.min_memory == 150);
  CHECK(s.infeasibility.group_min_memory == std::vector<double>{50, 100});
  CHECK(s.infeasibility.message.find("memory") != std::string::npos);

  p.limits = Limits{};
  p.batch_size = 1;
  p.limits.throughput_min = 16 / 1.5;  // runtime budget 1.5 s, minimum 2 s
  s = SolveMip(p);
  CHECK(s.infeasibility.binding == "runtime");
  CHECK(s.infeasibility.message.find("throughput_min") != std::string::npos);

  p.limits = Limits{};
  p.limits.memory_max = 175;  // memory wants layer 0 at v1, runtime wants v0
  p.limits.latency_max = 2.5;
  s = SolveMip(p);
  CHECK(s.infeasibility.binding == "joint");

  MipProblem q = Problem({{V(0, 0, 1, 1)}, {V(0, 0, 1, 1)}});
  q.alpha = 0.0;
  q.previous.push_back(Architecture{{{0, 0}, {0, 0}}});
  s = SolveMip(q);
  CHECK(s.infeasibility.binding == "diversity");
}

TEST_CASE("batch sweep") {
  // Per layer: (kv bytes per sequence, score) for kv8, kv4, kv1.
  auto make = [](int b) {
    std::vector<std::vector<MipVariant>> menu(2);
    for (auto& g : menu) {
      g = {V(0, 0.0, 100, 1.0, 50), V(1, 1.0, 100, 0.9, 25), V(2, 3.0, 100, 0.8, 6)};
    }
    MipProblem p = Problem(menu);
    p.batch_size = b;
    p.limits.memory_max = 400;
    return p;
  };
  SUBCASE("single batch equals a direct solve") {
    const SweepResult r = BatchSweep(make, {2}, 0);
    REQUIRE(r.rows.size() == 1);
    CHECK(r.best == 0);
    CHECK(r.rows[0].solution.ToJson().dump() == SolveMip(make(2)).ToJson().dump());
  }
  SUBCASE("larger batches push the optimum to smaller caches") {
    const SweepResult r = BatchSweep(make, {1, 2, 4, 8}, 0, {}, 2);
    REQUIRE(r.rows.size() == 4);
    int prev_kv_index = 0;
    for (const SweepRow& row : r.rows) {
      const MipProblem p = make(row.batch);
      const Oracle o = Exhaustive(p);
      REQUIRE(row.solution.feasible == o.feasible);
      if (!o.feasible) continue;
      CHECK(row.solution.choice == o.choice);
      const int worst = *std::max_element(o.choice.begin(), o.choice.end());
      CHECK(worst >= prev_kv_index);
      prev_kv_index = worst;
    }
    CHECK(r.rows[0].solution.choice == std::vector<int>{0, 0});
    CHECK(r.rows[2].solution.choice == std::vector<int>{1, 1});
    // b=1 and b=2 tie on score; the higher throughput wins.
    CHECK(r.best == 1);
  }
  SUBCASE("max_batch cap filters the table") {
    const SweepResult r = BatchSweep(make, {1, 2, 4, 8}, 2);
    REQUIRE(r.rows.size() == 2);
    CHECK(r.rows.back().batch == 2);
  }
  SUBCASE("all infeasible") {
    const SweepResult r = BatchSweep(make, {64}, 0);
    CHECK(r.best == -1);
    CHECK(r.message.find("b=64") != std::string::npos);
  }
}

TEST_CASE("greedy baseline") {
  SUBCASE("unlimited budgets pick the per-layer minimum") {
    const MipProblem p = Problem({{V(0, 3, 1, 1), V(1, 1, 1, 1), V(2, 2, 1, 1)},
                                  {V(0, 0.5, 1, 1), V(1, 0.7, 1, 1)}});
    const BaselineResult r = GreedySearch(p);
    REQUIRE(r.feasible);
    CHECK(r.choice == std::vector<int>{1, 0});
  }
  SUBCASE("a 3-layer instance where greedy is strictly worse than the MIP") {
    // Equal split gives each layer 1 s. Layer 0 would gain most from its
    // expensive option but greedy visits it last, after the other layers
    // spent their shares.
    const MipProblem base = Problem({{V(0, 0.0, 1, 1.8), V(1, 5.0, 1, 0.2)},
                                     {V(0, 0.0, 1, 0.9), V(1, 0.4, 1, 0.2)},
                                     {V(0, 0.0, 1, 0.9), V(1, 0.4, 1, 0.2)}});
    MipProblem p = base;
    p.limits.latency_max = 3.0;
    const BaselineResult g = GreedySearch(p);
    const MipSolution m = SolveMip(p);
    REQUIRE(g.feasible);
    REQUIRE(m.feasible);
    CHECK(IsFeasible(p, g.choice));
    CHECK(g.totals.score > m.objective);
    CHECK(m.choice == Exhaustive(p).choice);
  }
  SUBCASE("never better than the MIP on 500 random instances") {
    Rng rng(404);
    int compared = 0;
    for (int i = 0; i < 500; ++i) {
      MipProblem p = RandomProblem(rng, 6, 5, false);
      p.polarity = Polarity::kCost;
      const BaselineResult g = GreedySearch(p);
      if (!g.feasible) continue;
      const MipSolution m = SolveMip(p);
      REQUIRE(m.feasible);
      CHECK(IsFeasible(p, g.choice));
      CHECK(m.objective <= g.totals.score);
      ++compared;
    }
    CHECK(compared > 100);
  }
  SUBCASE("infeasible budgets are reported") {
    MipProblem p = Problem({{V(0, 0, 10, 1)}, {V(0, 0, 10, 1)}});
    p.limits.memory_max = 15;
    const BaselineResult g = GreedySearch(p);
    CHECK_FALSE(g.feasible);
    CHECK(g.message.find("budget") != std::string::npos);
  }
}

TEST_CASE("max-parameters baseline") {
  SUBCASE("unlimited budgets keep the largest variants") {
    const MipProblem p = Problem({{V(0, 0, 300, 1), V(1, 1, 200, 1), V(2, 2, 100, 1)},
                                  {V(0, 0, 300, 1), V(1, 1, 200, 1)}});
    CHECK(MaxParamsSearch(p).choice == std::vector<int>{0, 0});
  }
  SUBCASE("tight budgets pick the largest fitting variant per layer") {
    MipProblem p = Problem({{V(0, 0, 300, 1), V(1, 1, 200, 1), V(2, 2, 100, 1)},
                            {V(0, 0, 300, 1), V(1, 1, 200, 1), V(2, 2, 100, 1)}});
    p.limits.memory_max = 450;  // 225 per layer: layer 0 -> 200, rollover 25 -> 250 -> 200
    const BaselineResult r = MaxParamsSearch(p);
    REQUIRE(r.feasible);
    CHECK(r.choice == std::vector<int>{1, 1});
    p.limits.memory_max = 500;  // 250: 200, then 300 -> 300
    CHECK(MaxParamsSearch(p).choice == std::vector<int>{1, 0});
    const std::vector<std::vector<double>> params = {{1, 2, 3}, {1, 2, 3}};
    CHECK(MaxParamsSearch(p, &params).choice == std::vector<int>{2, 2});
  }
}

TEST_CASE("random-search baseline") {
  const MipProblem open = Problem({{V(0, 0, 1, 1), V(1, 0, 1, 1)}, {V(0, 0, 1, 1)}});
  const BaselineResult first = RandomSearch(open, RandomMode::kFromLibrary, 3, 10);
  CHECK(first.feasible);
  CHECK(first.attempts == 1);
  CHECK_FALSE(first.fresh_weights);
  CHECK(RandomSearch(open, RandomMode::kFullyRandom, 3, 10).fresh_weights);

  MipProblem p = Problem({{V(0, 0, 10, 1), V(1, 0, 50, 1), V(2, 0, 90, 1)},
               {V(0, 0, 10, 1), V(1, 0, 50, 1), V(2, 0, 90, 1)},
               {V(0, 0, 10, 1), V(1, 0, 50, 1), V(2, 0, 90, 1)}});
  p.limits.memory_max = 120;
  const BaselineResult a = RandomSearch(p, RandomMode::kFromLibrary, 42, 1000);
  const BaselineResult b = RandomSearch(p, RandomMode::kFromLibrary, 42, 1000);
  CHECK(a.choice == b.choice);
  CHECK(a.attempts == b.attempts);
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const BaselineResult r = RandomSearch(p, RandomMode::kFromLibrary, seed, 1000);
    REQUIRE(r.feasible);
    CHECK(r.totals.memory_bytes <= 120);
    CHECK(IsFeasible(p, r.choice));
  }
  p.limits.memory_max = 20;
  const BaselineResult fail = RandomSearch(p, RandomMode::kFromLibrary, 1, 50);
  CHECK_FALSE(fail.feasible);
  CHECK(fail.message.find("50 attempts") != std::string::npos);
}

TEST_CASE("block encoding and subblock groups agree") {
  Rng rng(15);
  const SearchSpace space = SearchSpace::Default(3, ParentShape{8, 8, 8, 256});
  const ResourceTable table =
      BuildAnalyticTable(space, Scenario{}, {1, 8}, HardwareProfile{});
  std::vector<ScoreEntry> entries;
  for (int l = 0; l < 3; ++l) {
    const LayerMenu& menu = space.layer(l);
    for (int j = 0; j < static_cast<int>(menu.attention.size()); ++j) {
      const double v = j == space.parent_attention_index(l) ? 0.0 : Uniform(rng, 0, 1);
      entries.push_back({l, Subblock::kAttention, j, -1, menu.attention[j].id(), v});
    }
    for (int k = 0; k < static_cast<int>(menu.ffn.size()); ++k) {
      const double v = k == space.parent_ffn_index(l) ? 0.0 : Uniform(rng, 0, 1);
      entries.push_back({l, Subblock::kFfn, -1, k, menu.ffn[k].id(), v});
    }
  }
  const ScoreLedger ledger(MetricKind::kKlDivergence, ScoreGranularity::kSubblock, "fp",
                           entries);
  const MipProblem parent_only = BuildProblem(space, ledger, table, 1, Limits{});
  const Totals parent = ComputeTotals(parent_only, std::vector<int>(3, 0));
  for (double frac : {0.3, 0.5, 0.7, 0.9}) {
    Limits limits;
    limits.memory_max = frac * parent.memory_bytes;
    limits.latency_max = (frac + 0.05) * parent.runtime_seconds;
    const MipSolution block = SolveMip(BuildProblem(space, ledger, table, 1, limits));
    const MipSolution groups = SolveMip(
        BuildProblem(space, ledger, table, 1, limits, Encoding::kSubblockGroups));
    REQUIRE(block.feasible == groups.feasible);
    if (!block.feasible) continue;
    CHECK(std::abs(block.objective - groups.objective) <= 1e-12);
    CHECK(std::abs(block.totals.memory_bytes - groups.totals.memory_bytes) <=
          1e-9 * parent.memory_bytes);
  }
  // Unlimited: every layer stays at the parent.
  const MipSolution open = SolveMip(BuildProblem(space, ledger, table, 1, Limits{}));
  CHECK(open.architecture == Architecture::AllParent(space));
  CHECK(open.objective == 0.0);
  CHECK(MaxParamsSearch(BuildProblem(space, ledger, table, 1, Limits{})).architecture ==
        Architecture::AllParent(space));
}

TEST_CASE("problem and solution files") {
  Rng rng(3);
  const MipProblem p = RandomProblem(rng, 4, 4, true);
  const MipProblem q = MipProblem::FromJson(p.ToJson());
  CHECK(q.ToJson() == p.ToJson());
  CHECK(SolveMip(q).ToJson() == SolveMip(p).ToJson());

  ProblemFile f;
  f.space = "space.json";
  f.ledger = "ledger.json";
  f.resources = "resources.csv";
  f.batches = {1, 4};
  f.limits.memory_max = 1e6;
  f.alpha = 0.5;
  f.num_solutions = 3;
  const ProblemFile g = ProblemFile::FromJson(f.ToJson());
  CHECK(g.ToJson() == f.ToJson());
  CHECK(g.limits.latency_max == kUnlimited);
  CHECK_THROWS_AS(ProblemFile::FromJson({{"space", "x"}}), Error);
}
