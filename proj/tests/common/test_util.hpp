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

// Shared fixtures and oracles for unit and acceptance tests.

#ifndef PUZZLE_TESTS_TEST_UTIL_HPP_
#define PUZZLE_TESTS_TEST_UTIL_HPP_

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "puzzle/block_init.hpp"
#include "puzzle/common.hpp"
#include "puzzle/corpus.hpp"
#include "puzzle/training.hpp"
#include "puzzle/toy_model.hpp"

namespace puzzle::testing {

inline Matrix RandomMatrix(Eigen::Index r, Eigen::Index c, Rng& rng, double sd = 1.0) {
  Matrix m(r, c);
  FillNormal(m, sd, rng);
  return m;
}

inline FfnWeights RandomFfn(int h, int inter, Rng& rng) {
  return {RandomMatrix(h, inter, rng), RandomMatrix(h, inter, rng),
          RandomMatrix(inter, h, rng)};
}

inline AttentionWeights RandomAttention(int query_heads, int kv_heads, int head_dim,
                                        int h, Rng& rng) {
  AttentionWeights a;
  a.query_heads = query_heads;
  a.kv_heads = kv_heads;
  a.head_dim = head_dim;
  a.w_q = RandomMatrix(h, query_heads * head_dim, rng, 0.5);
  a.w_k = RandomMatrix(h, kv_heads * head_dim, rng, 0.5);
  a.w_v = RandomMatrix(h, kv_heads * head_dim, rng, 0.5);
  a.w_o = RandomMatrix(query_heads * head_dim, h, rng, 0.5);
  return a;
}

// Small config for finite-difference checks.
inline ModelConfig TinyConfig(int layers = 2) {
  ModelConfig c;
  c.num_layers = layers;
  c.hidden_dim = 8;
  c.query_heads = 2;
  c.head_dim = 4;
  c.kv_heads = 2;
  c.intermediate_dim = 12;
  c.vocab_size = 11;
  c.max_seq_len = 8;
  return c;
}

// Randomizes every norm scale so their gradients are exercised.
inline void PerturbNorms(ToyTransformer& m, Rng& rng) {
  auto bump = [&](Matrix& s) {
    if (s.size() == 0) return;
    Matrix noise = RandomMatrix(s.rows(), s.cols(), rng, 0.2);
    s.array() += noise.array();
  };
  bump(m.final_norm);
  for (Block& b : m.layers()) {
    bump(b.attention.norm);
    bump(b.ffn.norm);
  }
}

// A 2-layer model whose layers cover every subblock kind: layer 0 is
// GQA with shared KV heads plus a pruned gated FFN, layer 1 is linear
// attention plus linear FFN. `noop_ffn` turns layer 1's FFN into a no-op.
inline ToyTransformer MixedModel(std::uint64_t seed, bool noop_ffn = false) {
  ModelConfig c = TinyConfig(2);
  ToyTransformer m = ToyTransformer::Random(c, seed);
  Rng rng(MixSeed(seed, 99));
  Block& b0 = m.layer(0);
  b0.attention.gqa = MeanPoolKv(b0.attention.gqa, 1);
  b0.ffn.gated.w_up.conservativeResize(Eigen::NoChange, 7);
  b0.ffn.gated.w_gate.conservativeResize(Eigen::NoChange, 7);
  b0.ffn.gated.w_down.conservativeResize(7, Eigen::NoChange);
  Block& b1 = m.layer(1);
  b1.attention.kind = AttentionKind::kLinear;
  b1.attention.linear = RandomMatrix(c.hidden_dim, c.hidden_dim, rng, 0.4);
  b1.attention.gqa = AttentionWeights{};
  if (noop_ffn) {
    b1.ffn = NoOpFfn();
  } else {
    b1.ffn.kind = FfnKind::kLinear;
    b1.ffn.linear = RandomMatrix(c.hidden_dim, c.hidden_dim, rng, 0.4);
    b1.ffn.gated = FfnWeights{};
  }
  PerturbNorms(m, rng);
  return m;
}

inline std::vector<int> RandomTokens(int n, int vocab, Rng& rng) {
  std::vector<int> t(n);
  for (int& x : t) x = UniformIndex(rng, vocab);
  return t;
}

struct FdReport {
  double max_rel_error = 0.0;
  int checked = 0;
  std::string worst;
};

// Central differences on up to `per_tensor` random coordinates of every
// tensor. The relative error uses max(|analytic|, |numeric|, floor) as the
// denominator; the floor keeps coordinates whose gradient is numerically
// zero from dividing rounding noise by zero.
inline FdReport CheckGradients(const std::function<double()>& loss,
                               const std::vector<NamedParam>& params,
                               const std::vector<NamedParam>& grads, int per_tensor,
                               Rng& rng, double step = 1e-6, double floor = 1e-4) {
  FdReport report;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& w = *params[i].value;
    const Matrix& g = *grads[i].value;
    const int n = static_cast<int>(w.size());
    std::vector<int> coords;
    if (n <= per_tensor) {
      for (int c = 0; c < n; ++c) coords.push_back(c);
    } else {
      for (int c = 0; c < per_tensor; ++c) coords.push_back(UniformIndex(rng, n));
    }
    for (int c : coords) {
      double& x = w.data()[c];
      const double saved = x;
      x = saved + step;
      const double up = loss();
      x = saved - step;
      const double down = loss();
      x = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double analytic = g.data()[c];
      const double denom = std::max({std::abs(numeric), std::abs(analytic), floor});
      const double rel = std::abs(numeric - analytic) / denom;
      ++report.checked;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst = params[i].name + "[" + std::to_string(c) + "] analytic=" +
                       std::to_string(analytic) + " numeric=" + std::to_string(numeric);
      }
    }
  }
  return report;
}

// A briefly trained small parent with its corpora.
struct MiniSetup {
  ModelConfig config;
  Corpus train;
  Corpus heldout;
  ToyTransformer parent;
};

inline ModelConfig MiniConfig() {
  ModelConfig c;
  c.num_layers = 2;
  c.hidden_dim = 16;
  c.query_heads = 4;
  c.head_dim = 4;
  c.kv_heads = 4;
  c.intermediate_dim = 32;
  c.vocab_size = 32;
  c.max_seq_len = 16;
  return c;
}

inline MiniSetup MakeMiniSetup(std::uint64_t seed, int parent_steps = 300) {
  MiniSetup s;
  s.config = MiniConfig();
  const MarkovMixture source(s.config.vocab_size, 4, 3, seed);
  s.train = MakeCorpus(source, 48, s.config.max_seq_len, MixSeed(seed, 1));
  s.heldout = MakeCorpus(source, 8, s.config.max_seq_len, MixSeed(seed, 2));
  ParentTrainConfig pt;
  pt.steps = parent_steps;
  pt.seed = seed;
  s.parent = TrainParent(s.config, s.train, pt);
  return s;
}

}  // namespace puzzle::testing

#endif  // PUZZLE_TESTS_TEST_UTIL_HPP_
