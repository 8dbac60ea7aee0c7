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

// Distillation losses. Each loss optionally writes its gradient with
// respect to the child-side input it consumes.

#ifndef PUZZLE_LOSSES_HPP_
#define PUZZLE_LOSSES_HPP_

#include <string>
#include <vector>

#include "puzzle/common.hpp"
#include "puzzle/toy_model.hpp"

namespace puzzle {

// MSE(o_p, o_c) / MSE(o_p, 0).
double BldLoss(const Matrix& o_parent, const Matrix& o_child,
               Matrix* d_child = nullptr);

// Mean over rows of -log softmax(logits)[target]. Uses the first
// targets.size() rows of `logits`.
double LmLoss(const Matrix& logits, const std::vector<int>& targets,
              Matrix* d_logits = nullptr);

// Sum over layers of the token-mean of (1 - cos(h_c, h_p)). A zero-norm
// token vector counts as cosine 0 and contributes no gradient; such tokens
// are counted in `degenerate`.
double CosineLoss(const std::vector<Matrix>& child_hidden,
                  const std::vector<Matrix>& parent_hidden,
                  std::vector<Matrix>* d_child = nullptr, int* degenerate = nullptr);

// Token-mean of KL(parent || child) over next-token distributions.
double KldLoss(const Matrix& parent_logits, const Matrix& child_logits,
               Matrix* d_child_logits = nullptr);

struct GkdLossSpec {
  bool use_lm = false;
  bool use_cosine = true;
  bool use_kld = true;

  // Cosine + KLD.
  static GkdLossSpec Default() { return {}; }
  static GkdLossSpec Make(bool lm, bool cosine, bool kld);
  void Validate() const;
  std::string name() const;
};

// Sum of the enabled components for one sequence. `targets` is required
// iff spec.use_lm. When `grads` is non-null it receives dL/dlogits and
// dL/dhidden for the child.
double GkdLoss(const GkdLossSpec& spec, const ForwardTrace& child,
               const ForwardTrace& parent, const std::vector<int>* targets,
               OutputGrads* grads = nullptr);

// Next-token targets for a sequence: tokens[1..T-1].
std::vector<int> NextTokenTargets(const std::vector<int>& tokens);

}  // namespace puzzle

#endif  // PUZZLE_LOSSES_HPP_
