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

// End-to-end orchestration: parent training, block library construction,
// resource table, scoring, per-slice batch sweeps, reassembly, GKD and
// evaluation. Every stage persists its artifacts under the output directory
// together with a fingerprint of its inputs, so a rerun picks up the stages
// whose inputs did not change.

#ifndef PUZZLE_PIPELINE_HPP_
#define PUZZLE_PIPELINE_HPP_

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "puzzle/corpus.hpp"
#include "puzzle/losses.hpp"
#include "puzzle/resource_model.hpp"
#include "puzzle/scoring.hpp"
#include "puzzle/search_space.hpp"
#include "puzzle/solver.hpp"
#include "puzzle/toy_model.hpp"
#include "puzzle/training.hpp"

namespace puzzle {

nlohmann::json ReadJsonFile(const std::string& path);
void WriteJsonFile(const std::string& path, const nlohmann::json& doc);
std::string ReadTextFile(const std::string& path);
void WriteTextFile(const std::string& path, const std::string& text);
// Digest of the compact dump; object keys are sorted, so equal documents
// hash equally.
std::string JsonFingerprint(const nlohmann::json& doc);

struct CorpusSpec {
  int num_chains = 4;
  int branching = 3;
  int sequence_length = 64;
  int train_sequences = 2048;
  int heldout_sequences = 32;
  int score_sequences = 48;
  int eval_sequences = 64;
};

struct TaskSpec {
  int tasks_per_category = 4;
  int prompts_per_task = 16;
  int prompt_len = 24;
  int candidates = 4;
};

// All seeds are mandatory in configuration files.
struct PipelineSeeds {
  std::uint64_t corpus = 1;
  std::uint64_t parent = 2;
  std::uint64_t bld = 3;
  std::uint64_t scoring = 4;
  std::uint64_t gkd = 5;
  std::uint64_t baselines = 6;

  nlohmann::json ToJson() const;
  static PipelineSeeds FromJson(const nlohmann::json& doc);
  bool operator==(const PipelineSeeds&) const = default;
};

// Limits expressed as multiples of the all-parent architecture's totals at
// `reference_batch`. Unset factors impose nothing.
struct RelativeLimits {
  int reference_batch = 1;
  std::optional<double> throughput_factor;
  std::optional<double> memory_factor;
  std::optional<double> latency_factor;
};

struct SliceSpec {
  std::string name;
  std::vector<int> batches;  // empty: the resource table's batches
  int max_batch = 0;         // 0: no cap
  Limits limits;             // absolute
  std::optional<RelativeLimits> relative;

  nlohmann::json ToJson() const;
  static SliceSpec FromJson(const nlohmann::json& doc);
};

struct PipelineConfig {
  std::string output_dir = "puzzle_out";
  int workers = 1;
  PipelineSeeds seeds;
  ModelConfig model;
  std::optional<SearchSpace> space;  // unset: the default menus
  CorpusSpec corpus;
  TaskSpec tasks;

  ParentTrainConfig parent;  // parent.seed is taken from seeds.parent
  std::string parent_path;   // load instead of training when set

  BldMode bld_mode = BldMode::kDecoupled;
  BldBudget bld_budget;
  int calibration_tokens = 4096;

  MetricKind metric = MetricKind::kKlDivergence;
  ScoreGranularity granularity = ScoreGranularity::kSubblock;

  Scenario scenario;
  HardwareProfile hardware;
  std::vector<int> batches = {1, 2, 4, 8};
  std::string measurements_path;  // measured table instead of the analytic one

  std::vector<SliceSpec> slices;
  double alpha = 1.0;
  int num_solutions = 1;
  Encoding encoding = Encoding::kBlock;

  bool gkd_enabled = true;
  GkdLossSpec gkd_loss = GkdLossSpec::Default();
  GkdBudget gkd_budget;  // gkd_budget.seed is taken from seeds.gkd

  int heatmap_batch = 1;
  std::vector<double> heatmap_throughput_factors;

  bool baselines_enabled = true;
  int random_attempts = 2000;

  // Paths are resolved against `base_dir`. Missing sections keep their
  // defaults; the seeds section is required.
  static PipelineConfig FromJson(const nlohmann::json& doc, const std::string& base_dir = ".");
  static PipelineConfig Load(const std::string& path);
  nlohmann::json ToJson() const;
  // Fingerprint of everything that affects results (output_dir and
  // workers excluded).
  std::string Hash() const;
  SearchSpace ResolvedSpace() const;
  void Validate() const;
};

// Synthetic data derived from the corpus seed.
struct PipelineData {
  Corpus train;
  Corpus heldout;
  Corpus score;
  Corpus eval;
  TaskPool pool;
  TaskSplit split;  // half A scores, half B evaluates

  static PipelineData Make(const PipelineConfig& config);
};

// Stage computations without persistence; the pipeline and the C API use
// these so both produce identical artifacts for identical configs.
ToyTransformer RunParentStage(const PipelineConfig& config, const PipelineData& data,
                              std::vector<double>* losses = nullptr);
// `init_only` skips BLD training.
BlockLibrary RunLibraryStage(const PipelineConfig& config, const ToyTransformer& parent,
                             const SearchSpace& space, const PipelineData& data,
                             bool init_only = false);
// Batches of the configuration, the slices, relative-limit references and
// the heatmap.
std::vector<int> TableBatches(const PipelineConfig& config);
ResourceTable RunResourceStage(const PipelineConfig& config, const SearchSpace& space);
ScoreLedger RunScoringStage(const PipelineConfig& config, const ToyTransformer& parent,
                            const BlockLibrary& library, const PipelineData& data);
GkdResult RunGkdStage(const PipelineConfig& config, const ToyTransformer& parent,
                      const ToyTransformer& child, const PipelineData& data,
                      std::uint64_t seed);

struct ModelMetrics {
  double lm_loss = 0.0;
  double kl = 0.0;
  double accuracy = 0.0;
  double mtbench_proxy = 0.0;  // 10 * exp(-kl), in [0, 10]
  double mmlu_proxy = 0.0;     // 100 * accuracy
  double composite = 0.0;      // (mtbench_proxy * 10 + mmlu_proxy) / 2

  nlohmann::json ToJson() const;
};

ModelMetrics EvaluateMetrics(const ToyTransformer& parent, const ToyTransformer& model,
                             const Corpus& eval, const std::vector<ProbeTask>& tasks);

// Same variant kinds and shapes with freshly drawn weights.
Block RandomizeBlockWeights(const Block& block, Rng& rng);

// Per-layer child/parent runtime ratio at `batch` for each subblock.
struct RuntimeRatios {
  std::vector<double> attention;
  std::vector<double> ffn;
};
RuntimeRatios ComputeRuntimeRatios(const SearchSpace& space, const ResourceTable& table,
                                   const Architecture& arch, int batch);

struct HeatmapRow {
  double throughput_target = 0.0;
  Architecture architecture;
};

struct Heatmap {
  std::vector<double> targets;  // ascending
  std::vector<std::vector<double>> attention;  // [row][layer]
  std::vector<std::vector<double>> ffn;
  int batch = 1;

  std::string AttentionCsv() const;
  std::string FfnCsv() const;
};

// Rows sorted by ascending target; cells are runtime(child) / runtime(parent).
Heatmap EmitHeatmap(const std::vector<HeatmapRow>& rows, const SearchSpace& space,
                    const ResourceTable& table, int batch);

// Totals of the all-parent choice of a problem.
Totals ParentTotals(const MipProblem& problem, const SearchSpace& space);

struct BaselineRow {
  std::string strategy;  // "mip", "greedy", "max_params", "random_library", "fully_random"
  bool feasible = false;
  double ledger_estimate = 0.0;
  double kl = 0.0;
  double accuracy = 0.0;
  double throughput = 0.0;
  bool constraints_satisfied = false;
  bool fresh_weights = false;
  Architecture architecture;
  std::string message;

  nlohmann::json ToJson() const;
};

struct StageRecord {
  std::string name;
  std::string fingerprint;
  bool resumed = false;
  double seconds = 0.0;
  std::vector<std::string> artifacts;  // relative to the output directory
};

struct SliceReport {
  std::string name;
  Limits limits;  // effective absolute limits
  bool feasible = false;
  std::string message;
  int batch = 0;
  Architecture architecture;
  std::vector<Architecture> alternatives;  // diverse follow-up solutions
  Totals totals;
  bool constraints_satisfied = false;
  RuntimeRatios ratios;
  ModelMetrics before_gkd;
  ModelMetrics after_gkd;
  std::vector<GkdPoint> gkd_history;
  std::vector<BaselineRow> baselines;
  std::vector<std::string> artifacts;

  nlohmann::json ToJson() const;
};

struct RunReport {
  std::string config_hash;
  PipelineSeeds seeds;
  std::vector<StageRecord> stages;
  ModelMetrics parent_metrics;
  std::vector<SliceReport> slices;
  std::optional<Heatmap> heatmap;
  std::vector<std::string> artifacts;

  // Stage timings and resume flags are left out; they go to timings.json.
  nlohmann::json ToJson() const;
  std::string ToText() const;
};

// Stage names in execution order.
const std::vector<std::string>& PipelineStages();

// Runs or resumes every stage. A failing stage raises an Error whose
// message names the stage and its artifact path.
RunReport RunPipeline(const PipelineConfig& config);

// Baseline table for every slice from the artifacts of a finished run.
// `seed` overrides seeds.baselines for the random strategies.
std::vector<std::vector<BaselineRow>> CompareBaselines(
    const PipelineConfig& config, std::optional<std::uint64_t> seed = std::nullopt);

// Solves a problem file whose table paths are relative to `base_dir`.
// Without `sweep` only the first batch size is solved. The result holds
// the sweep rows, the chosen batch and up to num_solutions diverse
// solutions at that batch.
nlohmann::json SolveProblemFile(const ProblemFile& file, const std::string& base_dir,
                                bool sweep, int workers = 1);

}  // namespace puzzle

#endif  // PUZZLE_PIPELINE_HPP_
