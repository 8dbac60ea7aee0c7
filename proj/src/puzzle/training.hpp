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

// Optimizer, parent pre-training, blockwise local distillation (BLD) into a
// block library, and end-to-end GKD uptraining of assembled children.

#ifndef PUZZLE_TRAINING_HPP_
#define PUZZLE_TRAINING_HPP_

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"
#include "puzzle/corpus.hpp"
#include "puzzle/losses.hpp"
#include "puzzle/search_space.hpp"
#include "puzzle/toy_model.hpp"

namespace puzzle {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig config) : config_(config) {}
  // `params` and `grads` must list matching shapes in the same order on
  // every call.
  void Step(const std::vector<NamedParam>& params,
            const std::vector<NamedParam>& grads);
  int steps() const { return t_; }

 private:
  AdamConfig config_;
  std::vector<Matrix> m_, v_;
  int t_ = 0;
};

struct ParentTrainConfig {
  int steps = 5000;
  double lr = 3e-3;
  int batch_size = 4;
  std::uint64_t seed = 1;
};

// Random init from `seed`, then LM-loss training on `train`. `losses`
// receives the mean batch loss of every step.
ToyTransformer TrainParent(const ModelConfig& config, const Corpus& train,
                           const ParentTrainConfig& options,
                           std::vector<double>* losses = nullptr);

// Mean next-token LM loss of a model over a corpus.
double CorpusLmLoss(const ToyTransformer& model, const Corpus& corpus);

// ---------------------------------------------------------------------------
// Block library.

enum class BldMode { kDecoupled, kCoupled };
const char* BldModeName(BldMode mode);
BldMode ParseBldMode(const std::string& name);

enum class JobTarget { kAttention, kFfn, kBoth };
const char* JobTargetName(JobTarget target);

enum class Provenance { kParent, kNoOp, kInitOnly, kDecoupledBld, kCoupledBld };
const char* ProvenanceName(Provenance p);
Provenance ParseProvenance(const std::string& name);

struct BldBudget {
  int steps = 200;
  double lr = 1e-3;
  int batch_size = 2;
  int eval_every = 25;
  bool operator==(const BldBudget&) const = default;
};

struct BldJob {
  int layer = 0;
  JobTarget target = JobTarget::kAttention;
  int attention = -1;  // menu index; -1 when not trained by this job
  int ffn = -1;
  BldMode mode = BldMode::kDecoupled;
  int steps = 0;
  double lr = 0.0;
  std::uint64_t seed = 0;

  std::string id(const SearchSpace& space) const;
};

struct BldPlan {
  BldMode mode = BldMode::kDecoupled;
  BldBudget budget;
  std::vector<BldJob> jobs;
  // Jobs training one subblock with the counterpart frozen at parent.
  int subblock_jobs = 0;
  // Jobs training an attention/FFN pair jointly.
  int pair_jobs = 0;
};

// Trainable variants exclude the parent and no-op entries of each menu.
// Decoupled: one job per trainable attention and FFN variant per layer,
// (m + n) * l. Coupled: one pair job per (trainable attention, trainable
// FFN) per layer, m * n * l, plus the (m + n) * l subblock jobs that cover
// pairs whose other side is parent or no-op. Job seeds depend only on the
// job identity, so execution order does not matter.
BldPlan PlanBld(const SearchSpace& space, BldMode mode, const BldBudget& budget,
                std::uint64_t seed);

struct LibraryRecord {
  int layer = 0;
  JobTarget target = JobTarget::kAttention;
  int attention = -1;
  int ffn = -1;
  std::string variant_id;
  Provenance provenance = Provenance::kInitOnly;
  std::uint64_t seed = 0;
  int steps = 0;
  double init_loss = 0.0;
  double final_loss = 0.0;
  bool diverged = false;
};

class BlockLibrary {
 public:
  BlockLibrary() = default;
  BlockLibrary(SearchSpace space, ModelConfig config);

  const SearchSpace& space() const { return *space_; }
  const ModelConfig& config() const { return config_; }
  BldMode mode() const { return mode_; }
  void set_mode(BldMode mode) { mode_ = mode; }

  AttentionBlock& attention(int layer, int j);
  const AttentionBlock& attention(int layer, int j) const;
  FfnBlock& ffn(int layer, int k);
  const FfnBlock& ffn(int layer, int k) const;
  bool HasAttention(int layer, int j) const;
  bool HasFfn(int layer, int k) const;
  void SetAttention(int layer, int j, AttentionBlock block);
  void SetFfn(int layer, int k, FfnBlock block);

  void SetPair(int layer, int j, int k, Block block);
  const Block* Pair(int layer, int j, int k) const;

  // Jointly trained pair when present, otherwise the two subblocks.
  Block Compose(int layer, int j, int k) const;
  // Parent embeddings/head with every layer replaced by its library block.
  ToyTransformer Assemble(const ToyTransformer& parent, const Architecture& arch) const;

  std::vector<LibraryRecord>& records() { return records_; }
  const std::vector<LibraryRecord>& records() const { return records_; }
  nlohmann::json& metadata() { return metadata_; }
  const nlohmann::json& metadata() const { return metadata_; }

  // Directory with library.json plus one tensor container per entry.
  void Save(const std::string& dir) const;
  static BlockLibrary Load(const std::string& dir);
  // Digest of the manifest and all weights.
  std::string Fingerprint() const;

 private:
  std::optional<SearchSpace> space_;
  ModelConfig config_;
  BldMode mode_ = BldMode::kDecoupled;
  std::vector<std::vector<std::optional<AttentionBlock>>> attention_;
  std::vector<std::vector<std::optional<FfnBlock>>> ffn_;
  std::map<std::tuple<int, int, int>, Block> pairs_;
  std::vector<LibraryRecord> records_;
  nlohmann::json metadata_ = nlohmann::json::object();
};

// Input to w_down at `layer` for the first `max_tokens` corpus tokens.
Matrix CalibrationActivations(const ToyTransformer& parent, int layer,
                              const Corpus& corpus, int max_tokens = 4096);

// Training-free library: parent copies, KV mean-pooling, Channel
// Contribution pruning, linear replacements, and no-ops.
BlockLibrary BuildInitLibrary(const ToyTransformer& parent, const SearchSpace& space,
                              const Corpus& calibration, int max_tokens = 4096);

struct BldOptions {
  BldBudget budget;
  std::uint64_t seed = 7;
  int workers = 1;
  int calibration_tokens = 4096;
};

// Parent activations per layer for a corpus: inputs[l][s] enters layer l
// and inputs[l + 1][s] is the parent block output.
struct ParentActivations {
  std::vector<std::vector<Matrix>> inputs;
  static ParentActivations Compute(const ToyTransformer& parent, const Corpus& corpus);
};

struct BldJobResult {
  Block block;
  double init_loss = 0.0;
  double final_loss = 0.0;
  bool diverged = false;
};

// Mean normalized MSE of `child` against parent block outputs at `layer`.
double HeldOutBldLoss(const Block& child, int layer, const ParentActivations& acts);

// Trains the `target` subblocks of `child` to match the parent block output
// at `layer`. The best held-out weights seen (initialization included) are
// returned, so final_loss <= init_loss.
BldJobResult TrainBldJob(const Block& child, JobTarget target, int layer,
                         const ParentActivations& train,
                         const ParentActivations& heldout, const BldBudget& budget,
                         std::uint64_t seed);

// Initialization followed by every job in the plan.
BlockLibrary RunBld(const ToyTransformer& parent, const SearchSpace& space,
                    BldMode mode, const Corpus& train, const Corpus& heldout,
                    const BldOptions& options);

// Same, but executing the plan's jobs in the given order. Used to check
// that job order does not affect the result.
BlockLibrary RunBldJobs(const ToyTransformer& parent, BlockLibrary init,
                        const BldPlan& plan, const std::vector<int>& order,
                        const Corpus& train, const Corpus& heldout, int workers);

// ---------------------------------------------------------------------------
// Global knowledge distillation.

struct GkdBudget {
  int steps = 2000;
  double lr = 1e-4;
  int batch_size = 1;
  int eval_every = 100;
  std::uint64_t seed = 11;
};

struct GkdPoint {
  int step = 0;
  double validation_kld = 0.0;
  double train_loss = 0.0;  // mean over steps since the previous point
};

struct GkdResult {
  ToyTransformer model;  // best validation-KLD checkpoint
  std::vector<GkdPoint> history;
  int best_step = 0;
  bool diverged = false;
};

// Mean token KL(parent || child) over a corpus.
double CorpusKld(const ToyTransformer& parent, const ToyTransformer& child,
                 const Corpus& corpus);

GkdResult RunGkd(const ToyTransformer& child, const ToyTransformer& parent,
                 const GkdLossSpec& spec, const Corpus& train, const Corpus& valid,
                 const GkdBudget& budget);

struct AblationRow {
  std::string name;  // "none" for the untrained baseline
  bool use_lm = false;
  bool use_cosine = false;
  bool use_kld = false;
  double validation_kld = 0.0;
  // True when validation KLD rose between the first and last checkpoint.
  bool kld_increased = false;
  int rank = 0;  // 1 = lowest validation KLD
  std::vector<GkdPoint> history;
};

// The untrained child plus all seven non-empty loss combinations under the
// same budget.
std::vector<AblationRow> RunGkdAblation(const ToyTransformer& child,
                                        const ToyTransformer& parent,
                                        const Corpus& train, const Corpus& valid,
                                        const GkdBudget& budget);

}  // namespace puzzle

#endif  // PUZZLE_TRAINING_HPP_
