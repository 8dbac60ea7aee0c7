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

// Exact grouped selection: one variant per group (a layer, or a layer's
// attention / FFN half), optimizing the summed score under a memory budget
// and a runtime budget derived from throughput and latency limits, with
// optional diversity cuts against earlier solutions. Also the greedy,
// max-parameter and random-sampling baselines.

#ifndef PUZZLE_SOLVER_HPP_
#define PUZZLE_SOLVER_HPP_

#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"
#include "puzzle/resource_model.hpp"
#include "puzzle/scoring.hpp"
#include "puzzle/search_space.hpp"

namespace puzzle {

inline constexpr double kUnlimited = std::numeric_limits<double>::infinity();

struct MipVariant {
  int attention = -1;  // menu index set by this option, -1 when untouched
  int ffn = -1;
  std::string id;
  double score = 0.0;
  double mem_params = 0.0;  // bytes
  double mem_kv = 0.0;      // bytes per sequence
  double runtime = 0.0;     // seconds at the problem's batch size
};

struct MipGroup {
  int layer = 0;
  std::vector<MipVariant> variants;
};

// Infinite limits are written as null in JSON.
struct Limits {
  double memory_max = kUnlimited;      // bytes
  double throughput_min = 0.0;         // tokens per second
  double latency_max = kUnlimited;     // seconds
  void Validate() const;
  nlohmann::json ToJson() const;
  static Limits FromJson(const nlohmann::json& doc);
  bool operator==(const Limits&) const = default;
};

// Block: one group per layer over all (attention, FFN) pairs.
// Subblock groups: an attention group and an FFN group per layer.
enum class Encoding { kBlock, kSubblockGroups };
const char* EncodingName(Encoding e);
Encoding ParseEncoding(const std::string& name);

struct MipProblem {
  std::vector<MipGroup> groups;
  int num_layers = 0;
  int batch_size = 1;
  int seq_len = 1;
  Limits limits;
  Polarity polarity = Polarity::kCost;
  // Diversity cuts: a solution may agree with each previous architecture
  // on at most floor(alpha * groups) groups.
  std::vector<Architecture> previous;
  double alpha = 1.0;

  void Validate() const;
  int MaxSharedGroups() const;
  nlohmann::json ToJson() const;
  static MipProblem FromJson(const nlohmann::json& doc);
};

struct LinearBudgets {
  double memory = kUnlimited;   // bytes; per option mem_params + b * mem_kv
  double runtime = kUnlimited;  // seconds; min of the two below
  double runtime_from_throughput = kUnlimited;  // b * seq_len / throughput_min
  double latency = kUnlimited;
};
LinearBudgets LinearizeConstraints(const MipProblem& problem);

struct Totals {
  double score = 0.0;
  double memory_bytes = 0.0;
  double runtime_seconds = 0.0;
  double throughput = kUnlimited;  // tokens per second
};

// `choice[g]` indexes problem.groups[g].variants.
Totals ComputeTotals(const MipProblem& problem, const std::vector<int>& choice);
// Budget check with the solver's integer arithmetic, plus diversity cuts.
bool IsFeasible(const MipProblem& problem, const std::vector<int>& choice);
// Groups on which `choice` agrees with `arch`.
int SharedGroups(const MipProblem& problem, const std::vector<int>& choice,
                 const Architecture& arch);
Architecture ChoiceToArchitecture(const MipProblem& problem, const std::vector<int>& choice);

struct InfeasibilityReport {
  std::string binding;  // "memory", "runtime", "memory+runtime", "joint", "diversity"
  std::string message;
  double min_memory = 0.0;
  double memory_budget = kUnlimited;
  double min_runtime = 0.0;
  double runtime_budget = kUnlimited;
  std::vector<double> group_min_memory;
  std::vector<double> group_min_runtime;
  nlohmann::json ToJson() const;
};

struct SolveStats {
  long long nodes = 0;
  long long pruned_bound = 0;
  long long pruned_budget = 0;
  long long pruned_diversity = 0;
  int dominated = 0;
  double root_bound = 0.0;  // in objective units
  double lambda_runtime = 0.0;
  double lambda_memory = 0.0;
  double runtime_unit = 0.0;  // integer ticks per second
  double wall_seconds = 0.0;
};

struct MipSolution {
  bool feasible = false;
  Architecture architecture;
  std::vector<int> choice;
  double objective = 0.0;
  Totals totals;
  bool proved_optimal = false;
  double gap = 0.0;
  SolveStats stats;
  InfeasibilityReport infeasibility;

  // Wall time is left out unless asked for, so solution files are
  // reproducible.
  nlohmann::json ToJson(bool include_timing = false) const;
};

struct SolveOptions {
  long long max_nodes = -1;  // < 0: unlimited
  bool use_dominance = true;
  bool use_lagrangian = true;
  int record_bounds = 0;  // keep this many search nodes for auditing
};

// Bound at a search node with groups [0, prefix.size()) fixed, expressed
// as a lower bound on the minimized quantity (score for costs, -score for
// benefits).
struct BoundRecord {
  std::vector<int> prefix;
  double bound = 0.0;
};

MipSolution SolveMip(const MipProblem& problem, const SolveOptions& options = {},
                     std::vector<BoundRecord>* bounds = nullptr);

MipProblem AddDiversityCut(MipProblem problem, const MipSolution& solution);
// Solves repeatedly, adding a cut after each solution, until `count`
// solutions are found or the problem becomes infeasible.
std::vector<MipSolution> SolveDiverse(const MipProblem& problem, int count,
                                      const SolveOptions& options = {});

// Problem over `space` at batch size `batch` from a score ledger and a
// resource table.
MipProblem BuildProblem(const SearchSpace& space, const ScoreLedger& ledger,
                        const ResourceTable& table, int batch, const Limits& limits,
                        Encoding encoding = Encoding::kBlock);

struct SweepRow {
  int batch = 0;
  MipSolution solution;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  int best = -1;  // index into rows, -1 when every batch is infeasible
  std::string message;
};

// Solves at every batch size <= max_batch and keeps the best objective,
// ties going to the higher throughput and then the smaller batch.
SweepResult BatchSweep(const std::function<MipProblem(int)>& make_problem,
                       const std::vector<int>& batches, int max_batch,
                       const SolveOptions& options = {}, int workers = 1);

struct BaselineResult {
  bool feasible = false;
  Architecture architecture;
  std::vector<int> choice;
  Totals totals;
  std::string message;
  int attempts = 0;
  double acceptance_rate = 0.0;
  bool fresh_weights = false;  // fully random sampling
};

// Equal per-group split of the linearized budgets, groups visited in
// ascending order of mean score, lowest-score variant within the current
// budget, unspent budget rolled into the next visited group.
BaselineResult GreedySearch(const MipProblem& problem);
// Same budget mechanics, picking the variant with the most parameters.
// `params[g][j]` defaults to mem_params.
BaselineResult MaxParamsSearch(const MipProblem& problem,
                               const std::vector<std::vector<double>>* params = nullptr);

enum class RandomMode { kFromLibrary, kFullyRandom };
const char* RandomModeName(RandomMode m);
// Uniform draws per group, rejected until the budgets hold.
BaselineResult RandomSearch(const MipProblem& problem, RandomMode mode, std::uint64_t seed,
                            int max_attempts);

// Solve request file: references to the tables plus scenario and limits.
struct ProblemFile {
  std::string space;
  std::string ledger;
  std::string resources;
  std::vector<int> batches = {1};
  int max_batch = 0;  // 0: no cap
  Limits limits;
  double alpha = 1.0;
  int num_solutions = 1;
  Encoding encoding = Encoding::kBlock;

  nlohmann::json ToJson() const;
  static ProblemFile FromJson(const nlohmann::json& doc);
};

}  // namespace puzzle

#endif  // PUZZLE_SOLVER_HPP_
