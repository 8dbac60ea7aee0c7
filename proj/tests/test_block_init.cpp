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

#include <cmath>
#include <numeric>
#include <vector>

#include "common/test_util.hpp"
#include "doctest.h"
#include "puzzle/block_init.hpp"
#include "puzzle/toy_model.hpp"

namespace puzzle {
namespace {

using testing::RandomAttention;
using testing::RandomFfn;
using testing::RandomMatrix;

Matrix Silu(const Matrix& g) {
  return g.unaryExpr([](double x) { return x / (1.0 + std::exp(-x)); });
}

// Post-gating activations for normalized inputs n.
Matrix Activations(const FfnWeights& f, const Matrix& n) {
  return Silu(n * f.w_gate).cwiseProduct(n * f.w_up);
}

TEST_CASE("channel contribution hand example") {
  FfnWeights f;
  f.w_up = Matrix::Zero(2, 3);
  f.w_gate = Matrix::Zero(2, 3);
  f.w_down.resize(3, 2);
  f.w_down << 1, 0, 0, 2, 3, 4;  // row norms 1, 2, 5
  Matrix x(2, 3);
  x << 1, 1, 1, 2, 0, 1;
  const ChannelRanking r = ChannelContribution(f, x);
  CHECK(r.mean_contribution[0] == doctest::Approx(1.5));
  CHECK(r.mean_contribution[1] == doctest::Approx(1.0));
  CHECK(r.mean_contribution[2] == doctest::Approx(5.0));
  CHECK(r.order == std::vector<int>{1, 0, 2});

  const FfnWeights pruned = PruneFfn(f, r, 2.0 / 3.0);
  REQUIRE(pruned.intermediate_dim() == 2);
  CHECK(pruned.w_down.row(0) == f.w_down.row(0));
  CHECK(pruned.w_down.row(1) == f.w_down.row(2));
}

TEST_CASE("zero-activation channel ranks first") {
  Rng rng(1);
  FfnWeights f = RandomFfn(4, 6, rng);
  Matrix x = RandomMatrix(5, 6, rng).cwiseAbs();
  x.col(3).setZero();
  const ChannelRanking r = ChannelContribution(f, x);
  CHECK(r.mean_contribution[3] == 0.0);
  CHECK(r.order.front() == 3);
  for (int i = 0; i < 6; ++i) CHECK(r.mean_contribution[i] >= 0.0);
}

TEST_CASE("empty calibration set is rejected") {
  Rng rng(2);
  FfnWeights f = RandomFfn(4, 6, rng);
  CHECK_THROWS_WITH_AS(ChannelContribution(f, Matrix(0, 6)), "empty calibration set",
                       Error);
}

TEST_CASE("per-token contribution equals single-channel removal distance") {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const int h = 3 + trial % 4;
    const int inter = 5 + trial % 7;
    FfnWeights f = RandomFfn(h, inter, rng);
    const Matrix x = Activations(f, RandomMatrix(1, h, rng));
    const ChannelRanking r = ChannelContribution(f, x);
    // Oracle in extended precision: full output minus the output with the
    // channel's down-projection row removed.
    using Ld = long double;
    auto output = [&](int skip) {
      std::vector<Ld> y(h, 0.0L);
      for (int c = 0; c < inter; ++c) {
        if (c == skip) continue;
        for (int k = 0; k < h; ++k) y[k] += static_cast<Ld>(x(0, c)) * f.w_down(c, k);
      }
      return y;
    };
    const std::vector<Ld> y = output(-1);
    for (int i = 0; i < inter; ++i) {
      const std::vector<Ld> y_removed = output(i);
      Ld sq = 0.0L;
      for (int k = 0; k < h; ++k) sq += (y[k] - y_removed[k]) * (y[k] - y_removed[k]);
      const double dist = static_cast<double>(std::sqrt(sq));
      const double rel = std::abs(dist - r.mean_contribution[i]) /
                         std::max(dist, 1e-300);
      CHECK(rel <= 1e-12);
    }
  }
}

TEST_CASE("order is ascending with index tie-break") {
  FfnWeights f;
  f.w_up = f.w_gate = Matrix::Zero(1, 4);
  f.w_down = Matrix::Ones(4, 1);
  Matrix x(1, 4);
  x << 2, 1, 2, 1;
  const ChannelRanking r = ChannelContribution(f, x);
  CHECK(r.order == std::vector<int>{1, 3, 0, 2});
}

TEST_CASE("prune ratio 1 is identity and bad ratios fail") {
  Rng rng(4);
  FfnWeights f = RandomFfn(4, 8, rng);
  const ChannelRanking r = ChannelContribution(f, RandomMatrix(6, 8, rng));
  const FfnWeights same = PruneFfn(f, r, 1.0);
  CHECK(same.w_up == f.w_up);
  CHECK(same.w_gate == f.w_gate);
  CHECK(same.w_down == f.w_down);
  CHECK_THROWS_AS(PruneFfn(f, r, 0.0), Error);
  CHECK_THROWS_AS(PruneFfn(f, r, 1.2), Error);
  CHECK_THROWS_AS(PruneFfn(f, r, 0.01), Error);  // rounds to zero channels
}

TEST_CASE("contribution pruning beats random subsets in expectation") {
  Rng rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    const int h = 6, inter = 16, keep = 8;
    FfnWeights f = RandomFfn(h, inter, rng);
    const Matrix n = RandomMatrix(64, h, rng);
    const Matrix x = Activations(f, n);
    const Matrix y = x * f.w_down;
    const FfnWeights pruned = PruneFfn(f, ChannelContribution(f, x), 0.5);
    const double mse_pruned = (Activations(pruned, n) * pruned.w_down - y).squaredNorm();
    double mse_random = 0.0;
    const int draws = 200;
    for (int d = 0; d < draws; ++d) {
      std::vector<int> idx(inter);
      std::iota(idx.begin(), idx.end(), 0);
      for (int i = inter - 1; i > 0; --i) std::swap(idx[i], idx[UniformIndex(rng, i + 1)]);
      Matrix down = f.w_down;
      for (int i = keep; i < inter; ++i) down.row(idx[i]).setZero();
      mse_random += (x * down - y).squaredNorm();
    }
    CHECK(mse_pruned <= mse_random / draws);
  }
}

TEST_CASE("ffn to linear hand examples") {
  FfnWeights f;
  f.w_up.resize(2, 3);
  f.w_up << 1, 0, 1, 0, 1, 0;
  f.w_gate = Matrix::Zero(2, 3);
  f.w_down.resize(3, 2);
  f.w_down << 1, 0, 0, 1, 1, 1;
  Matrix expect(2, 2);
  expect << 2, 1, 0, 1;
  CHECK(FfnToLinear(f) == expect);

  FfnWeights id{Matrix::Identity(3, 3), Matrix::Zero(3, 3), Matrix::Identity(3, 3)};
  CHECK(FfnToLinear(id) == Matrix::Identity(3, 3));
}

TEST_CASE("ffn to linear equals gate-frozen FFN") {
  Rng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    FfnWeights f = RandomFfn(5, 9, rng);
    const Matrix n = RandomMatrix(4, 5, rng);
    // Gated FFN with the gate activation replaced by ones, element by element.
    Matrix frozen = Matrix::Zero(4, 5);
    for (int t = 0; t < 4; ++t) {
      for (int c = 0; c < 9; ++c) {
        const double act = 1.0 * n.row(t).dot(f.w_up.col(c));
        frozen.row(t) += act * f.w_down.row(c);
      }
    }
    CHECK((n * FfnToLinear(f) - frozen).cwiseAbs().maxCoeff() <= 1e-10);
  }
}

TEST_CASE("attention to linear hand examples") {
  AttentionWeights a;
  a.query_heads = a.kv_heads = 1;
  a.head_dim = 2;
  a.w_q = a.w_k = Matrix::Identity(2, 2);
  a.w_v.resize(2, 2);
  a.w_v << 2, 0, 0, 3;
  a.w_o.resize(2, 2);
  a.w_o << 1, 1, 0, 1;
  Matrix expect(2, 2);
  expect << 2, 2, 0, 3;
  CHECK(AttentionToLinear(a) == expect);

  a.w_v = a.w_o = Matrix::Identity(2, 2);
  CHECK(AttentionToLinear(a) == Matrix::Identity(2, 2));
}

TEST_CASE("attention to linear equals length-1 attention") {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const int q = 4, kv = (trial % 3 == 0) ? 1 : (trial % 3 == 1 ? 2 : 4), d = 3;
    const int h = q * d;
    AttentionBlock full;
    full.kind = AttentionKind::kGqa;
    full.gqa = RandomAttention(q, kv, d, h, rng);
    full.norm = Matrix::Ones(1, h) + RandomMatrix(1, h, rng, 0.1);
    AttentionBlock lin;
    lin.kind = AttentionKind::kLinear;
    lin.linear = AttentionToLinear(full.gqa);
    lin.norm = full.norm;
    const Matrix x = RandomMatrix(1, h, rng);
    const Matrix diff = AttentionBranch(full, x, nullptr) - AttentionBranch(lin, x, nullptr);
    CHECK(diff.cwiseAbs().maxCoeff() <= 1e-10);
  }
}

TEST_CASE("mean pool kv") {
  AttentionWeights a;
  a.query_heads = 2;
  a.kv_heads = 2;
  a.head_dim = 2;
  a.w_q = Matrix::Ones(1, 4);
  a.w_k.resize(1, 4);
  a.w_k << 1, 2, 3, 4;
  a.w_v = a.w_k * 10.0;
  a.w_o = Matrix::Ones(4, 1);
  const AttentionWeights p = MeanPoolKv(a, 1);
  Matrix expect(1, 2);
  expect << 2, 3;
  CHECK(p.w_k == expect);
  CHECK(p.w_v == expect * 10.0);
  CHECK(p.w_q == a.w_q);
  CHECK(p.w_o == a.w_o);
  CHECK(p.kv_heads == 1);

  const AttentionWeights same = MeanPoolKv(a, 2);
  CHECK(same.w_k == a.w_k);
  CHECK(same.w_v == a.w_v);
}

TEST_CASE("mean pool 4 to 2 heads matches groupwise oracle") {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const int d = 3, h = 12;
    const AttentionWeights a = RandomAttention(4, 4, d, h, rng);
    const AttentionWeights p = MeanPoolKv(a, 2);
    for (int g = 0; g < 2; ++g) {
      const Matrix k = 0.5 * (a.w_k.middleCols((2 * g) * d, d) +
                              a.w_k.middleCols((2 * g + 1) * d, d));
      const Matrix v = 0.5 * (a.w_v.middleCols((2 * g) * d, d) +
                              a.w_v.middleCols((2 * g + 1) * d, d));
      CHECK((p.w_k.middleCols(g * d, d) - k).cwiseAbs().maxCoeff() <= 1e-15);
      CHECK((p.w_v.middleCols(g * d, d) - v).cwiseAbs().maxCoeff() <= 1e-15);
    }
    // Idempotent at target = source, commutes with scaling.
    const AttentionWeights again = MeanPoolKv(p, 2);
    CHECK(again.w_k == p.w_k);
    AttentionWeights scaled = a;
    scaled.w_k *= 3.0;
    scaled.w_v *= 3.0;
    const AttentionWeights ps = MeanPoolKv(scaled, 2);
    CHECK((ps.w_k - 3.0 * p.w_k).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK((ps.w_v - 3.0 * p.w_v).cwiseAbs().maxCoeff() <= 1e-12);
  }
  Rng r2(9);
  const AttentionWeights a = RandomAttention(4, 4, 3, 12, r2);
  CHECK_THROWS_AS(MeanPoolKv(a, 3), Error);
}

}  // namespace
}  // namespace puzzle
