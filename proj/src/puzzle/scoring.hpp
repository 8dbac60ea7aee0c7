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

// Replace-1-block scores: the parent with a single subblock (or block)
// swapped for a library variant, evaluated against the parent under a
// KL-divergence, LM-loss or probe-accuracy metric. The ledger holds one
// score per (layer, variant) and sums into an architecture estimate.

#ifndef PUZZLE_SCORING_HPP_
#define PUZZLE_SCORING_HPP_

#include <cstdint>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"
#include "puzzle/corpus.hpp"
#include "puzzle/search_space.hpp"
#include "puzzle/toy_model.hpp"
#include "puzzle/training.hpp"

namespace puzzle {

enum class MetricKind { kKlDivergence, kLmLoss, kDownstreamAccuracy };
enum class Polarity { kCost, kBenefit };
// kSubblock swaps attention and FFN independently with the counterpart at
// the parent; kBlock swaps every (attention, FFN) pair of a layer.
enum class ScoreGranularity { kSubblock, kBlock };

const char* MetricKindName(MetricKind kind);  // "kl", "lm_loss", "accuracy"
MetricKind ParseMetricKind(const std::string& name);
const char* PolarityName(Polarity p);  // "cost", "benefit"
const char* GranularityName(ScoreGranularity g);  // "subblock", "block"
ScoreGranularity ParseGranularity(const std::string& name);

struct ScoreMetric {
  MetricKind kind = MetricKind::kKlDivergence;
  Corpus corpus;                 // kKlDivergence, kLmLoss
  std::vector<ProbeTask> tasks;  // kDownstreamAccuracy

  static ScoreMetric Kl(Corpus corpus);
  static ScoreMetric Lm(Corpus corpus);
  static ScoreMetric Accuracy(std::vector<ProbeTask> tasks);

  Polarity polarity() const;
  // Digest of the evaluation corpus or task set.
  std::string fingerprint() const;
  void Validate() const;
};

std::string TaskSetFingerprint(const std::vector<ProbeTask>& tasks);

// Metric of `model` on its own: KL(parent || model) averaged over tokens,
// LM loss, or mean per-task probe accuracy in [0, 1].
double EvaluateModel(const ToyTransformer& parent, const ToyTransformer& model,
                     const ScoreMetric& metric);
double ProbeAccuracy(const ToyTransformer& model, const std::vector<ProbeTask>& tasks);

struct ScoreEntry {
  int layer = 0;
  // kAttention / kFfn at subblock granularity; unused for blocks.
  Subblock subblock = Subblock::kAttention;
  int attention = -1;  // menu index, -1 when not part of the swap
  int ffn = -1;
  std::string variant_id;  // "attn:gqa4", or "attn:gqa4+ffn:r0.500"
  double value = 0.0;
  bool operator==(const ScoreEntry&) const = default;
};

class ScoreLedger {
 public:
  ScoreLedger() = default;
  ScoreLedger(MetricKind metric, ScoreGranularity granularity, std::string corpus_fingerprint,
              std::vector<ScoreEntry> entries);

  MetricKind metric() const { return metric_; }
  Polarity polarity() const;
  ScoreGranularity granularity() const { return granularity_; }
  const std::string& corpus_fingerprint() const { return corpus_fingerprint_; }
  const std::vector<ScoreEntry>& entries() const { return entries_; }

  // Raw scores; throw kNotFound when the ledger lacks the entry.
  double Subblock(int layer, puzzle::Subblock s, int index) const;
  double Block(int layer, int attention, int ffn) const;

  // Score turned into a cost relative to the parent entry of the same
  // layer: value - parent for cost metrics, parent - value for benefits.
  // Zero at the parent, lower is better.
  double SubblockDegradation(int layer, puzzle::Subblock s, int index,
                             const SearchSpace& space) const;
  double BlockDegradation(int layer, int attention, int ffn, const SearchSpace& space) const;

  void CheckComplete(const SearchSpace& space) const;

  // JSON array of {layer, subblock, variant_id, metric, polarity, value,
  // corpus_fingerprint}; subblock is "block" for block-level entries.
  nlohmann::json ToJson() const;
  static ScoreLedger FromJson(const nlohmann::json& doc, const SearchSpace& space);
  void Save(const std::string& path) const;
  static ScoreLedger Load(const std::string& path, const SearchSpace& space);
  std::string Fingerprint() const;

  bool operator==(const ScoreLedger&) const = default;

 private:
  const ScoreEntry* Find(int layer, int kind, int a, int f) const;

  MetricKind metric_ = MetricKind::kKlDivergence;
  ScoreGranularity granularity_ = ScoreGranularity::kSubblock;
  std::string corpus_fingerprint_;
  std::vector<ScoreEntry> entries_;
  std::map<std::tuple<int, int, int, int>, std::size_t> index_;
};

// The parent resident in memory; scoring swaps one block at a time and
// restores it afterwards, counting the swaps.
class ResidentModel {
 public:
  explicit ResidentModel(const ToyTransformer& parent);
  const ToyTransformer& model() const { return model_; }
  void Substitute(int layer, const Block& block);
  void Restore(int layer);
  long long substitutions() const { return substitutions_; }
  const std::vector<long long>& substitutions_per_layer() const { return per_layer_; }

 private:
  ToyTransformer model_;
  std::vector<Block> original_;
  std::vector<bool> swapped_;
  long long substitutions_ = 0;
  std::vector<long long> per_layer_;
};

struct ScoringStats {
  long long evaluations = 0;
  long long substitutions = 0;
  std::vector<long long> substitutions_per_layer;
  int resident_models = 0;
};

struct ScoreOptions {
  ScoreGranularity granularity = ScoreGranularity::kSubblock;
  int workers = 1;
  // Permutation of entry positions; empty means natural order. Values do
  // not depend on it.
  std::vector<int> order;
};

// The parent with `layer`'s attention (or FFN) replaced by library entry
// `index`, the other subblock kept at the parent.
double ReplaceOneBlockScore(const ToyTransformer& parent, const BlockLibrary& library,
                            int layer, Subblock s, int index, const ScoreMetric& metric);
// The parent with `layer` replaced by the library pair (attention, ffn).
double ReplaceOneBlockScore(const ToyTransformer& parent, const BlockLibrary& library,
                            int layer, int attention, int ffn, const ScoreMetric& metric);

// Ledger entries in canonical order: layer-major; attention then FFN menus
// at subblock granularity, attention-major pairs at block granularity.
ScoreLedger ScoreFullSpace(const ToyTransformer& parent, const BlockLibrary& library,
                           const ScoreMetric& metric, const ScoreOptions& options = {},
                           ScoringStats* stats = nullptr);

// Sum over layers of the chosen entries' raw scores.
double EstimateArchitectureQuality(const ScoreLedger& ledger, const Architecture& arch);

struct TaskSplit {
  TaskPool half_a;  // used for scoring
  TaskPool half_b;  // held out for evaluation
};

// Stratified by category: each category's tasks are shuffled with the seed
// and split in half, odd remainders alternating between the halves.
TaskSplit SplitTaskPool(const TaskPool& pool, std::uint64_t split_seed);

struct DownstreamSplitScores {
  TaskSplit split;
  ScoreLedger half_a;
  ScoreLedger half_b;
};

DownstreamSplitScores DownstreamTaskSplitScore(const ToyTransformer& parent,
                                               const BlockLibrary& library,
                                               const TaskPool& pool,
                                               std::uint64_t split_seed,
                                               const ScoreOptions& options = {});

// Spearman rank correlation with average ranks for ties.
double SpearmanRho(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace puzzle

#endif  // PUZZLE_SCORING_HPP_
