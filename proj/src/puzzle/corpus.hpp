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

// Seeded synthetic token corpus: a mixture of sparse Markov chains over a
// shared vocabulary. Each chain gives a token different likely successors,
// so predicting well requires inferring the chain from context. The same
// chains generate the synthetic classification probes used as downstream
// tasks, with the chain index as the task category.

#ifndef PUZZLE_CORPUS_HPP_
#define PUZZLE_CORPUS_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include "puzzle/common.hpp"

namespace puzzle {

using Sequence = std::vector<int>;
using Corpus = std::vector<Sequence>;

class MarkovMixture {
 public:
  MarkovMixture(int vocab_size, int num_chains, int branching, std::uint64_t seed);

  int vocab_size() const { return vocab_size_; }
  int num_chains() const { return num_chains_; }

  Sequence Sample(int chain, int length, Rng& rng) const;
  // Chain chosen uniformly at random.
  Sequence SampleAny(int length, Rng& rng, int* chain_out = nullptr) const;
  int MostLikelyNext(int chain, int token) const;
  const std::vector<int>& Successors(int chain, int token) const;

 private:
  int vocab_size_;
  int num_chains_;
  int branching_;
  std::vector<std::vector<std::vector<int>>> successors_;  // [chain][token]
  std::vector<double> cumulative_;                          // branch CDF
};

Corpus MakeCorpus(const MarkovMixture& source, int num_sequences, int length,
                  std::uint64_t seed);

// Order-sensitive digest of a corpus.
std::string CorpusFingerprint(const Corpus& corpus);

// Next-token multiple-choice probe: the model is correct on a prompt when
// the answer token has the highest logit among the candidates at the last
// position.
struct ProbeTask {
  std::string name;
  int category = 0;
  std::vector<Sequence> prompts;
  std::vector<int> answers;
  std::vector<std::vector<int>> candidates;
};

struct TaskPool {
  std::vector<ProbeTask> tasks;
  int num_categories = 0;
};

TaskPool MakeTaskPool(const MarkovMixture& source, int tasks_per_category,
                      int prompts_per_task, int prompt_len, int num_candidates,
                      std::uint64_t seed);

}  // namespace puzzle

#endif  // PUZZLE_CORPUS_HPP_
