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

// Training-free initialization of child subblocks from parent weights.
//
// Conventions: activations are row vectors, so a projection is `x * W`.
// GQA groups query heads onto KV heads consecutively: query head h reads
// KV head h / (query_heads / kv_heads).

#ifndef PUZZLE_BLOCK_INIT_HPP_
#define PUZZLE_BLOCK_INIT_HPP_

#include <vector>

#include "puzzle/common.hpp"

namespace puzzle {

struct FfnWeights {
  Matrix w_up;    // H x I
  Matrix w_gate;  // H x I
  Matrix w_down;  // I x H

  int hidden_dim() const { return static_cast<int>(w_up.rows()); }
  int intermediate_dim() const { return static_cast<int>(w_up.cols()); }
  void CheckShapes() const;
};

struct AttentionWeights {
  Matrix w_q;  // H x (query_heads * head_dim)
  Matrix w_k;  // H x (kv_heads * head_dim)
  Matrix w_v;  // H x (kv_heads * head_dim)
  Matrix w_o;  // (query_heads * head_dim) x H
  int query_heads = 0;
  int kv_heads = 0;
  int head_dim = 0;

  int hidden_dim() const { return static_cast<int>(w_q.rows()); }
  void CheckShapes() const;
};

struct ChannelRanking {
  Vector mean_contribution;  // length I
  // Channel indices ascending by contribution, ties broken by index.
  std::vector<int> order;
};

// Per-token contribution |X_t,i| * ||W_down[i,:]||_2, averaged over tokens.
// `calibration_activations` is T x I: the input to w_down for each token.
ChannelRanking ChannelContribution(const FfnWeights& ffn,
                                   const Matrix& calibration_activations);

// Keeps the round(ratio * I) highest-contribution channels in their
// original relative order.
FfnWeights PruneFfn(const FfnWeights& ffn, const ChannelRanking& ranking,
                    double ratio);

// w_up * w_down: the FFN with its gate frozen at 1.
Matrix FfnToLinear(const FfnWeights& ffn);

// w_v (columns repeated per query group) * w_o: attention where every
// token attends only to itself.
Matrix AttentionToLinear(const AttentionWeights& attn);

// Averages each run of kv_heads / target consecutive K and V head slices.
AttentionWeights MeanPoolKv(const AttentionWeights& attn, int target_kv_heads);

// w_v with each KV head's columns repeated for every query head it serves.
Matrix ExpandKvColumns(const Matrix& w_kv, int query_heads, int kv_heads,
                       int head_dim);

}  // namespace puzzle

#endif  // PUZZLE_BLOCK_INIT_HPP_
