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

#include "puzzle/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace puzzle {

MarkovMixture::MarkovMixture(int vocab_size, int num_chains, int branching,
                             std::uint64_t seed)
    : vocab_size_(vocab_size), num_chains_(num_chains), branching_(branching) {
  Require(vocab_size >= 2 && num_chains >= 1 && branching >= 1 &&
              branching <= vocab_size,
          ErrorCode::kInvalidArgument, "bad Markov mixture parameters");
  Rng rng(seed);
  successors_.resize(num_chains);
  std::vector<int> pool(vocab_size);
  for (int c = 0; c < num_chains; ++c) {
    successors_[c].resize(vocab_size);
    for (int t = 0; t < vocab_size; ++t) {
      std::iota(pool.begin(), pool.end(), 0);
      // Partial Fisher-Yates for `branching` distinct successors.
      for (int k = 0; k < branching; ++k) {
        const int j = k + static_cast<int>(rng() % static_cast<std::uint64_t>(vocab_size - k));
        std::swap(pool[k], pool[j]);
      }
      successors_[c][t].assign(pool.begin(), pool.begin() + branching);
    }
  }
  // Branch k has weight 2^-k.
  double total = 0.0;
  for (int k = 0; k < branching; ++k) total += std::ldexp(1.0, -k);
  double acc = 0.0;
  for (int k = 0; k < branching; ++k) {
    acc += std::ldexp(1.0, -k) / total;
    cumulative_.push_back(acc);
  }
  cumulative_.back() = 1.0;
}

const std::vector<int>& MarkovMixture::Successors(int chain, int token) const {
  return successors_.at(chain).at(token);
}

int MarkovMixture::MostLikelyNext(int chain, int token) const {
  return Successors(chain, token).front();
}

Sequence MarkovMixture::Sample(int chain, int length, Rng& rng) const {
  Require(chain >= 0 && chain < num_chains_, ErrorCode::kOutOfRange,
          "chain index out of range");
  Sequence seq;
  seq.reserve(length);
  int tok = static_cast<int>(rng() % static_cast<std::uint64_t>(vocab_size_));
  for (int i = 0; i < length; ++i) {
    seq.push_back(tok);
    const double u = NextUniform(rng);
    int k = 0;
    while (k + 1 < branching_ && u >= cumulative_[k]) ++k;
    tok = successors_[chain][tok][k];
  }
  return seq;
}

Sequence MarkovMixture::SampleAny(int length, Rng& rng, int* chain_out) const {
  const int chain = static_cast<int>(rng() % static_cast<std::uint64_t>(num_chains_));
  if (chain_out != nullptr) *chain_out = chain;
  return Sample(chain, length, rng);
}

Corpus MakeCorpus(const MarkovMixture& source, int num_sequences, int length,
                  std::uint64_t seed) {
  Require(num_sequences >= 1 && length >= 1, ErrorCode::kInvalidArgument,
          "corpus must be non-empty");
  Rng rng(seed);
  Corpus corpus;
  corpus.reserve(num_sequences);
  for (int i = 0; i < num_sequences; ++i) corpus.push_back(source.SampleAny(length, rng));
  return corpus;
}

std::string CorpusFingerprint(const Corpus& corpus) {
  Fnv1a h;
  for (const Sequence& s : corpus) {
    const std::uint64_t n = s.size();
    h.Update(&n, sizeof(n));
    for (int t : s) {
      const std::int32_t v = t;
      h.Update(&v, sizeof(v));
    }
  }
  return h.hex();
}

TaskPool MakeTaskPool(const MarkovMixture& source, int tasks_per_category,
                      int prompts_per_task, int prompt_len, int num_candidates,
                      std::uint64_t seed) {
  Require(tasks_per_category >= 1 && prompts_per_task >= 1 && prompt_len >= 2 &&
              num_candidates >= 2 && num_candidates <= source.vocab_size(),
          ErrorCode::kInvalidArgument, "bad task pool parameters");
  Rng rng(seed);
  TaskPool pool;
  pool.num_categories = source.num_chains();
  for (int c = 0; c < source.num_chains(); ++c) {
    for (int k = 0; k < tasks_per_category; ++k) {
      ProbeTask task;
      task.category = c;
      task.name = "probe_c" + std::to_string(c) + "_" + std::to_string(k);
      for (int p = 0; p < prompts_per_task; ++p) {
        Sequence prompt = source.Sample(c, prompt_len, rng);
        const int answer = source.MostLikelyNext(c, prompt.back());
        std::vector<int> cands = {answer};
        while (static_cast<int>(cands.size()) < num_candidates) {
          const int d = static_cast<int>(rng() % static_cast<std::uint64_t>(source.vocab_size()));
          if (std::find(cands.begin(), cands.end(), d) == cands.end()) cands.push_back(d);
        }
        // Position of the answer among candidates is randomized.
        const int slot = static_cast<int>(rng() % static_cast<std::uint64_t>(num_candidates));
        std::swap(cands[0], cands[slot]);
        task.prompts.push_back(std::move(prompt));
        task.answers.push_back(answer);
        task.candidates.push_back(std::move(cands));
      }
      pool.tasks.push_back(std::move(task));
    }
  }
  return pool;
}

}  // namespace puzzle
