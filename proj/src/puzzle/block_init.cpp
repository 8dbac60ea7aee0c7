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

#include "puzzle/block_init.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace puzzle {

void FfnWeights::CheckShapes() const {
  const auto h = w_up.rows();
  const auto i = w_up.cols();
  Require(h > 0 && i > 0, ErrorCode::kShapeMismatch, "FFN: empty weights");
  Require(w_gate.rows() == h && w_gate.cols() == i && w_down.rows() == i &&
              w_down.cols() == h,
          ErrorCode::kShapeMismatch, "FFN: inconsistent up/gate/down shapes");
}

void AttentionWeights::CheckShapes() const {
  Require(query_heads > 0 && kv_heads > 0 && head_dim > 0,
          ErrorCode::kShapeMismatch, "attention: head counts must be positive");
  Require(query_heads % kv_heads == 0, ErrorCode::kShapeMismatch,
          "attention: query_heads must be a multiple of kv_heads");
  const auto h = w_q.rows();
  const auto qd = static_cast<Eigen::Index>(query_heads) * head_dim;
  const auto kvd = static_cast<Eigen::Index>(kv_heads) * head_dim;
  Require(w_q.cols() == qd && w_k.rows() == h && w_k.cols() == kvd &&
              w_v.rows() == h && w_v.cols() == kvd && w_o.rows() == qd &&
              w_o.cols() == h,
          ErrorCode::kShapeMismatch, "attention: inconsistent projection shapes");
}

ChannelRanking ChannelContribution(const FfnWeights& ffn,
                                   const Matrix& calibration_activations) {
  ffn.CheckShapes();
  Require(calibration_activations.rows() > 0, ErrorCode::kInvalidArgument,
          "empty calibration set");
  Require(calibration_activations.cols() == ffn.intermediate_dim(),
          ErrorCode::kShapeMismatch,
          "calibration activations must have I columns");
  const Vector row_norms = ffn.w_down.rowwise().norm();
  const Vector mean_abs =
      calibration_activations.cwiseAbs().colwise().mean().transpose();
  ChannelRanking ranking;
  ranking.mean_contribution = mean_abs.cwiseProduct(row_norms);
  ranking.order.resize(ffn.intermediate_dim());
  std::iota(ranking.order.begin(), ranking.order.end(), 0);
  const Vector& c = ranking.mean_contribution;
  std::stable_sort(ranking.order.begin(), ranking.order.end(),
                   [&](int a, int b) { return c[a] < c[b]; });
  return ranking;
}

FfnWeights PruneFfn(const FfnWeights& ffn, const ChannelRanking& ranking,
                    double ratio) {
  ffn.CheckShapes();
  Require(ratio > 0.0 && ratio <= 1.0, ErrorCode::kInvalidArgument,
          "prune ratio must lie in (0, 1]");
  const int total = ffn.intermediate_dim();
  Require(static_cast<int>(ranking.order.size()) == total,
          ErrorCode::kShapeMismatch, "ranking does not match FFN width");
  const int keep = static_cast<int>(std::lround(ratio * total));
  Require(keep >= 1, ErrorCode::kInvalidArgument,
          "prune ratio leaves zero channels");
  // The prune set is the lowest-contribution prefix of the order.
  std::vector<int> kept(ranking.order.begin() + (total - keep),
                        ranking.order.end());
  std::sort(kept.begin(), kept.end());
  FfnWeights out;
  out.w_up.resize(ffn.hidden_dim(), keep);
  out.w_gate.resize(ffn.hidden_dim(), keep);
  out.w_down.resize(keep, ffn.hidden_dim());
  for (int n = 0; n < keep; ++n) {
    out.w_up.col(n) = ffn.w_up.col(kept[n]);
    out.w_gate.col(n) = ffn.w_gate.col(kept[n]);
    out.w_down.row(n) = ffn.w_down.row(kept[n]);
  }
  return out;
}

Matrix FfnToLinear(const FfnWeights& ffn) {
  ffn.CheckShapes();
  return ffn.w_up * ffn.w_down;
}

Matrix ExpandKvColumns(const Matrix& w_kv, int query_heads, int kv_heads,
                       int head_dim) {
  const int group = query_heads / kv_heads;
  Matrix out(w_kv.rows(), static_cast<Eigen::Index>(query_heads) * head_dim);
  for (int h = 0; h < query_heads; ++h) {
    out.middleCols(h * head_dim, head_dim) =
        w_kv.middleCols((h / group) * head_dim, head_dim);
  }
  return out;
}

Matrix AttentionToLinear(const AttentionWeights& attn) {
  attn.CheckShapes();
  return ExpandKvColumns(attn.w_v, attn.query_heads, attn.kv_heads,
                         attn.head_dim) *
         attn.w_o;
}

namespace {

Matrix PoolHeads(const Matrix& w, int source, int target, int head_dim) {
  const int group = source / target;
  Matrix out = Matrix::Zero(w.rows(), static_cast<Eigen::Index>(target) * head_dim);
  for (int t = 0; t < target; ++t) {
    for (int s = 0; s < group; ++s) {
      out.middleCols(t * head_dim, head_dim) +=
          w.middleCols((t * group + s) * head_dim, head_dim);
    }
    out.middleCols(t * head_dim, head_dim) /= group;
  }
  return out;
}

}  // namespace

AttentionWeights MeanPoolKv(const AttentionWeights& attn, int target_kv_heads) {
  attn.CheckShapes();
  Require(target_kv_heads > 0 && attn.kv_heads % target_kv_heads == 0,
          ErrorCode::kInvalidArgument,
          "target kv_heads " + std::to_string(target_kv_heads) +
              " must divide source kv_heads " + std::to_string(attn.kv_heads));
  if (target_kv_heads == attn.kv_heads) return attn;
  AttentionWeights out = attn;
  out.kv_heads = target_kv_heads;
  out.w_k = PoolHeads(attn.w_k, attn.kv_heads, target_kv_heads, attn.head_dim);
  out.w_v = PoolHeads(attn.w_v, attn.kv_heads, target_kv_heads, attn.head_dim);
  return out;
}

}  // namespace puzzle
