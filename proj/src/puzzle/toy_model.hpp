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

// A small deterministic decoder-only transformer: pre-norm residual blocks
// with RMS normalization, learned absolute positions, GQA attention with a
// causal mask and SiLU-gated FFNs. Every subblock can instead be a single
// H x H linear map or a no-op (zero residual contribution). Gradients are
// derived by hand; see tests/test_toy_model.cpp for the finite-difference
// checks.

#ifndef PUZZLE_TOY_MODEL_HPP_
#define PUZZLE_TOY_MODEL_HPP_

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "puzzle/block_init.hpp"
#include "puzzle/common.hpp"
#include "puzzle/search_space.hpp"
#include "puzzle/tensor_io.hpp"

namespace puzzle {

struct ModelConfig {
  int num_layers = 4;
  int hidden_dim = 64;
  int query_heads = 8;
  int head_dim = 8;
  int kv_heads = 8;
  int intermediate_dim = 256;
  int vocab_size = 256;
  int max_seq_len = 128;

  void Validate() const;
  ParentShape parent_shape() const;
  nlohmann::json ToJson() const;
  static ModelConfig FromJson(const nlohmann::json& doc);
  bool operator==(const ModelConfig&) const = default;
};

struct AttentionBlock {
  AttentionKind kind = AttentionKind::kNoOp;
  AttentionWeights gqa;  // kGqa
  Matrix linear;         // kLinear, H x H
  Matrix norm;           // 1 x H; empty for kNoOp
};

struct FfnBlock {
  FfnKind kind = FfnKind::kNoOp;
  FfnWeights gated;  // kGated
  Matrix linear;     // kLinear, H x H
  Matrix norm;       // 1 x H; empty for kNoOp
};

struct Block {
  AttentionBlock attention;
  FfnBlock ffn;
};

struct NamedParam {
  std::string name;
  Matrix* value;
};

// Trainable tensors of a subblock or block, skipping empty ones.
std::vector<NamedParam> SubblockParams(AttentionBlock& a, const std::string& prefix);
std::vector<NamedParam> SubblockParams(FfnBlock& f, const std::string& prefix);
std::vector<NamedParam> BlockParams(Block& b, const std::string& prefix);

AttentionBlock ZerosLike(const AttentionBlock& a);
FfnBlock ZerosLike(const FfnBlock& f);
Block ZerosLike(const Block& b);

AttentionBlock NoOpAttention();
FfnBlock NoOpFfn();

// Materialized parameter count (norm scales excluded).
long long ParameterCount(const AttentionBlock& a);
long long ParameterCount(const FfnBlock& f);

// Variant descriptor of a materialized subblock.
AttentionVariant DescribeVariant(const AttentionBlock& a);
FfnVariant DescribeVariant(const FfnBlock& f, int parent_intermediate);

class ToyTransformer {
 public:
  ToyTransformer() = default;
  explicit ToyTransformer(const ModelConfig& config);

  // Parent model with every layer at the parent variant.
  static ToyTransformer Random(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  int num_layers() const { return static_cast<int>(layers_.size()); }
  Block& layer(int i);
  const Block& layer(int i) const;
  std::vector<Block>& layers() { return layers_; }
  const std::vector<Block>& layers() const { return layers_; }

  Matrix embedding;   // N x H
  Matrix position;    // max_seq_len x H
  Matrix final_norm;  // 1 x H
  Matrix head;        // H x N

  std::vector<NamedParam> Params();
  ToyTransformer ZerosLike() const;
  bool AllFinite() const;

  TensorMap ToTensors() const;
  nlohmann::json DescribeLayers() const;
  static ToyTransformer FromTensors(const TensorFile& file);
  void Save(const std::string& path, const nlohmann::json& extra = {}) const;
  static ToyTransformer Load(const std::string& path);

 private:
  ModelConfig config_;
  std::vector<Block> layers_;
};

struct ForwardTrace {
  std::vector<Matrix> hidden;  // output of each layer, T x H
  Matrix logits;               // T x N
  Matrix probs;                // T x N, row softmax of logits
};

// Forward intermediates needed by the backward pass.
struct NormCache {
  Vector inv_rms;  // per token
  Matrix xhat;     // x * inv_rms
};

struct AttentionCache {
  NormCache norm;
  Matrix n;                    // normalized input
  Matrix q, k, v;              // projections
  std::vector<Matrix> probs;   // per query head, T x T
  Matrix heads_out;            // T x (query_heads * head_dim)
};

struct FfnCache {
  NormCache norm;
  Matrix n;
  Matrix up, gate, act;  // act = silu(gate) * up; the input to w_down
};

struct BlockCache {
  AttentionCache attention;
  FfnCache ffn;
  Matrix mid;  // residual stream between the two subblocks
};

struct ModelCache {
  std::vector<int> tokens;
  std::vector<Matrix> inputs;  // input to each layer
  std::vector<BlockCache> blocks;
  NormCache final_norm;
  Matrix final_n;
  ForwardTrace trace;
};

// x (T x H) -> block output including both residual branches.
Matrix BlockForward(const Block& block, const Matrix& x, BlockCache* cache);
// Returns dL/dx and accumulates parameter gradients into `grad` (same
// variant kinds and shapes as `block`).
Matrix BlockBackward(const Block& block, const Matrix& x, const BlockCache& cache,
                     const Matrix& d_out, Block* grad);

// Residual-branch outputs (no residual added); used by oracles.
Matrix AttentionBranch(const AttentionBlock& a, const Matrix& x,
                       AttentionCache* cache);
Matrix FfnBranch(const FfnBlock& f, const Matrix& x, FfnCache* cache);

ForwardTrace Forward(const ToyTransformer& model, const std::vector<int>& tokens);
void ForwardWithCache(const ToyTransformer& model, const std::vector<int>& tokens,
                      ModelCache* cache);

// Residual stream entering `layer` when the parent runs on `tokens`.
Matrix ParentInputAt(const ToyTransformer& parent, const std::vector<int>& tokens,
                     int layer);

// Runs layers `layer`..L-1 of `model` on residual stream `x` (the input to
// `layer`), then the final norm and head. LogitsFrom(m, 0, embeddings)
// reproduces Forward(m, tokens).logits bit for bit.
Matrix LogitsFrom(const ToyTransformer& model, int layer, const Matrix& x);

struct BlockOutputs {
  Matrix o_parent;
  Matrix o_child;
};

// Runs the parent up to `layer`, then feeds the same parent activations to
// the parent block and to `child_block`.
BlockOutputs ForwardWithParentInputs(const ToyTransformer& parent,
                                     const Block& child_block, int layer,
                                     const std::vector<int>& tokens);

// Upstream gradients of one sequence: w.r.t. logits and optionally w.r.t.
// each layer's output hidden state.
struct OutputGrads {
  Matrix d_logits;                          // T x N, may be empty
  std::vector<std::optional<Matrix>> d_hidden;  // one per layer, may be empty
};

// Accumulates parameter gradients into `grad` (from ZerosLike()).
void Backward(const ToyTransformer& model, const ModelCache& cache,
              const OutputGrads& upstream, ToyTransformer* grad);

Matrix RowSoftmax(const Matrix& logits);

}  // namespace puzzle

#endif  // PUZZLE_TOY_MODEL_HPP_
