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

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "common/test_util.hpp"
#include "doctest.h"
#include "puzzle/scoring.hpp"

using namespace puzzle;
using namespace puzzle::testing;

namespace {

struct ScoringFixture {
  MiniSetup setup;
  SearchSpace space;
  BlockLibrary library;
  Corpus eval;
};

const ScoringFixture& Fixture() {
  static const ScoringFixture f = [] {
    ScoringFixture x{MakeMiniSetup(21), SearchSpace::Default(2, MiniConfig().parent_shape()),
                     {}, {}};
    x.library = BuildInitLibrary(x.setup.parent, x.space, x.setup.train);
    const MarkovMixture source(x.setup.config.vocab_size, 4, 3, 21);
    x.eval = MakeCorpus(source, 12, x.setup.config.max_seq_len, 99);
    return x;
  }();
  return f;
}

Architecture RandomArchitecture(const SearchSpace& space, Rng& rng) {
  Architecture a;
  for (int l = 0; l < space.num_layers(); ++l) {
    a.choices.push_back({UniformIndex(rng, static_cast<int>(space.layer(l).attention.size())),
                         UniformIndex(rng, static_cast<int>(space.layer(l).ffn.size()))});
  }
  return a;
}

int IndexOf(const LayerMenu& menu, AttentionKind kind) {
  for (std::size_t j = 0; j < menu.attention.size(); ++j) {
    if (menu.attention[j].kind == kind) return static_cast<int>(j);
  }
  return -1;
}

}  // namespace

TEST_CASE("parent variant has zero KL and a no-op attention swap has positive KL") {
  const auto& f = Fixture();
  const ScoreMetric kl = ScoreMetric::Kl(f.eval);
  for (int l = 0; l < 2; ++l) {
    CHECK(ReplaceOneBlockScore(f.setup.parent, f.library, l, Subblock::kAttention,
                               f.space.parent_attention_index(l), kl) == 0.0);
    CHECK(ReplaceOneBlockScore(f.setup.parent, f.library, l, Subblock::kFfn,
                               f.space.parent_ffn_index(l), kl) == 0.0);
    CHECK(ReplaceOneBlockScore(f.setup.parent, f.library, l, f.space.parent_attention_index(l),
                               f.space.parent_ffn_index(l), kl) == 0.0);
  }
  const int noop = IndexOf(f.space.layer(0), AttentionKind::kNoOp);
  CHECK(ReplaceOneBlockScore(f.setup.parent, f.library, 0, Subblock::kAttention, noop, kl) >
        0.0);
}

TEST_CASE("swap score equals the full-model metric of the swapped model") {
  const auto& f = Fixture();
  const ScoreMetric kl = ScoreMetric::Kl(f.eval);
  Architecture arch = Architecture::AllParent(f.space);
  arch.choices[1].ffn = 3;
  const double direct = EvaluateModel(f.setup.parent, f.library.Assemble(f.setup.parent, arch), kl);
  const double swap = ReplaceOneBlockScore(f.setup.parent, f.library, 1, Subblock::kFfn, 3, kl);
  CHECK(std::abs(direct - swap) <= 1e-12 * std::max(1.0, direct));
}

TEST_CASE("LM-loss score of the parent variant is the parent's own loss") {
  const auto& f = Fixture();
  const ScoreMetric lm = ScoreMetric::Lm(f.eval);
  const double own = CorpusLmLoss(f.setup.parent, f.eval);
  const double s = ReplaceOneBlockScore(f.setup.parent, f.library, 1, Subblock::kAttention,
                                        f.space.parent_attention_index(1), lm);
  CHECK(std::abs(s - own) <= 1e-12);
  CHECK(lm.polarity() == Polarity::kCost);
}

TEST_CASE("subblock ledger over 4 layers of a 6x9 menu has 60 rows") {
  ModelConfig c;
  c.max_seq_len = 16;
  const ToyTransformer parent = ToyTransformer::Random(c, 5);
  const SearchSpace space = SearchSpace::Default(4, c.parent_shape());
  const MarkovMixture source(c.vocab_size, 4, 3, 5);
  const Corpus calib = MakeCorpus(source, 4, 16, 1);
  const BlockLibrary lib = BuildInitLibrary(parent, space, calib);
  ScoringStats stats;
  const ScoreLedger ledger =
      ScoreFullSpace(parent, lib, ScoreMetric::Kl(MakeCorpus(source, 2, 16, 2)), {}, &stats);
  CHECK(ledger.entries().size() == 60);
  CHECK_NOTHROW(ledger.CheckComplete(space));
  CHECK(stats.evaluations == 60);
  CHECK(stats.resident_models == 1);
  CHECK(stats.substitutions == 60);
  for (long long per_layer : stats.substitutions_per_layer) CHECK(per_layer == 15);
}

TEST_CASE("ledger is deterministic and independent of order and workers") {
  const auto& f = Fixture();
  const ScoreMetric kl = ScoreMetric::Kl(f.eval);
  const ScoreLedger a = ScoreFullSpace(f.setup.parent, f.library, kl);
  const ScoreLedger b = ScoreFullSpace(f.setup.parent, f.library, kl);
  CHECK(a == b);
  CHECK(a.Fingerprint() == b.Fingerprint());

  ScoreOptions shuffled;
  shuffled.order.resize(a.entries().size());
  std::iota(shuffled.order.begin(), shuffled.order.end(), 0);
  std::reverse(shuffled.order.begin(), shuffled.order.end());
  shuffled.workers = 3;
  ScoringStats stats;
  const ScoreLedger c = ScoreFullSpace(f.setup.parent, f.library, kl, shuffled, &stats);
  CHECK(c == a);
  CHECK(stats.resident_models == 3);
  CHECK(stats.substitutions == static_cast<long long>(a.entries().size()));

  ScoreOptions bad;
  bad.order = {0, 0};
  CHECK_THROWS_AS(ScoreFullSpace(f.setup.parent, f.library, kl, bad), Error);
}

TEST_CASE("ledger fingerprint follows the corpus seed") {
  const auto& f = Fixture();
  const MarkovMixture source(f.setup.config.vocab_size, 4, 3, 21);
  auto ledger = [&](std::uint64_t seed) {
    return ScoreFullSpace(f.setup.parent, f.library,
                          ScoreMetric::Kl(MakeCorpus(source, 4, 16, seed)));
  };
  const ScoreLedger a = ledger(1), b = ledger(1), c = ledger(2);
  CHECK(a.Fingerprint() == b.Fingerprint());
  CHECK(a.Fingerprint() != c.Fingerprint());
  CHECK(a.corpus_fingerprint() != c.corpus_fingerprint());
}

TEST_CASE("KL ledger entries are nonnegative and parent entries are exactly zero") {
  const auto& f = Fixture();
  const ScoreLedger ledger = ScoreFullSpace(f.setup.parent, f.library, ScoreMetric::Kl(f.eval));
  for (const ScoreEntry& e : ledger.entries()) CHECK(e.value >= 0.0);
  for (int l = 0; l < 2; ++l) {
    CHECK(ledger.Subblock(l, Subblock::kAttention, f.space.parent_attention_index(l)) == 0.0);
    CHECK(ledger.Subblock(l, Subblock::kFfn, f.space.parent_ffn_index(l)) == 0.0);
  }
  CHECK(EstimateArchitectureQuality(ledger, Architecture::AllParent(f.space)) == 0.0);
}

TEST_CASE("block-granularity ledger covers every pair") {
  const auto& f = Fixture();
  ScoreOptions opts;
  opts.granularity = ScoreGranularity::kBlock;
  ScoringStats stats;
  const ScoreLedger ledger =
      ScoreFullSpace(f.setup.parent, f.library, ScoreMetric::Kl(f.eval), opts, &stats);
  const std::size_t pairs = f.space.layer(0).attention.size() * f.space.layer(0).ffn.size();
  CHECK(ledger.entries().size() == 2 * pairs);
  CHECK(stats.substitutions_per_layer[0] == static_cast<long long>(pairs));
  CHECK_NOTHROW(ledger.CheckComplete(f.space));
  CHECK(ledger.Block(0, f.space.parent_attention_index(0), f.space.parent_ffn_index(0)) == 0.0);
  CHECK_THROWS_AS(ledger.Subblock(0, Subblock::kAttention, 0), Error);
  // A subblock swap is a block swap with the other half at the parent.
  const ScoreLedger sub = ScoreFullSpace(f.setup.parent, f.library, ScoreMetric::Kl(f.eval));
  CHECK(ledger.Block(1, 2, f.space.parent_ffn_index(1)) ==
        sub.Subblock(1, Subblock::kAttention, 2));
}

TEST_CASE("architecture estimate sums chosen scores") {
  const SearchSpace space = SearchSpace::Uniform(2, ParentShape{2, 2, 2, 4}, [] {
    MenuSpec m;
    m.kv_heads = {2};
    m.ffn_ratios = {1.0};
    return m;
  }());
  std::vector<ScoreEntry> entries;
  for (int l = 0; l < 2; ++l) {
    const LayerMenu& menu = space.layer(l);
    for (int j = 0; j < 3; ++j) {
      entries.push_back({l, Subblock::kAttention, j, -1, menu.attention[j].id(), 0.0});
    }
    for (int k = 0; k < 3; ++k) {
      entries.push_back({l, Subblock::kFfn, -1, k, menu.ffn[k].id(), 0.0});
    }
  }
  // Layer 0 linear attention 0.1, layer 1 no-op FFN 0.3.
  entries[1].value = 0.1;
  entries[6 + 5].value = 0.3;
  const ScoreLedger ledger(MetricKind::kKlDivergence, ScoreGranularity::kSubblock, "x", entries);
  Architecture arch = Architecture::AllParent(space);
  arch.choices[0].attention = 1;
  arch.choices[1].ffn = 2;
  CHECK(std::abs(EstimateArchitectureQuality(ledger, arch) - 0.4) < 1e-15);
  CHECK(EstimateArchitectureQuality(ledger, Architecture::AllParent(space)) == 0.0);
  arch.choices[1].ffn = 7;
  CHECK_THROWS_AS(EstimateArchitectureQuality(ledger, arch), Error);

  std::vector<ScoreEntry> partial(entries.begin(), entries.end() - 1);
  const ScoreLedger incomplete(MetricKind::kKlDivergence, ScoreGranularity::kSubblock, "x",
                               partial);
  try {
    incomplete.CheckComplete(space);
    FAIL("expected incomplete ledger");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("layer 1") != std::string::npos);
  }
}

TEST_CASE("summed ledger score ranks random architectures like their true KL") {
  const auto& f = Fixture();
  const ScoreMetric kl = ScoreMetric::Kl(f.eval);
  const ScoreLedger ledger = ScoreFullSpace(f.setup.parent, f.library, kl);
  Rng rng(17);
  std::vector<double> estimate, truth;
  for (int i = 0; i < 20; ++i) {
    const Architecture a = RandomArchitecture(f.space, rng);
    estimate.push_back(EstimateArchitectureQuality(ledger, a));
    truth.push_back(EvaluateModel(f.setup.parent, f.library.Assemble(f.setup.parent, a), kl));
  }
  const double rho = SpearmanRho(estimate, truth);
  MESSAGE("spearman rho = " << rho);
  CHECK(rho > 0.0);
}

TEST_CASE("Spearman rank correlation") {
  CHECK(SpearmanRho({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0));
  CHECK(SpearmanRho({1, 2, 3, 4}, {4, 3, 2, 1}) == doctest::Approx(-1.0));
  // Ranks x = (1, 2.5, 2.5, 4), y = (1, 2, 3, 4): rho = 4.5 / sqrt(4.5 * 5).
  CHECK(SpearmanRho({1, 2, 2, 5}, {1, 2, 3, 4}) ==
        doctest::Approx(4.5 / std::sqrt(4.5 * 5.0)).epsilon(1e-14));
  CHECK_THROWS_AS(SpearmanRho({1, 1}, {1, 2}), Error);
}

TEST_CASE("ledger JSON round trip and schema errors") {
  const auto& f = Fixture();
  const ScoreLedger ledger = ScoreFullSpace(f.setup.parent, f.library, ScoreMetric::Kl(f.eval));
  const auto doc = ledger.ToJson();
  CHECK(doc[0].contains("corpus_fingerprint"));
  CHECK(doc[0]["polarity"] == "cost");
  CHECK(ScoreLedger::FromJson(doc, f.space) == ledger);
  const auto path = std::filesystem::temp_directory_path() / "puzzle_ledger_test.json";
  ledger.Save(path.string());
  CHECK(ScoreLedger::Load(path.string(), f.space) == ledger);
  std::filesystem::remove(path);

  auto bad = doc;
  bad[3]["variant_id"] = "attn:gqa16";
  CHECK_THROWS_AS(ScoreLedger::FromJson(bad, f.space), Error);
  bad = doc;
  bad[0]["polarity"] = "benefit";
  CHECK_THROWS_AS(ScoreLedger::FromJson(bad, f.space), Error);
  bad = doc;
  bad.push_back(doc[0]);
  CHECK_THROWS_AS(ScoreLedger::FromJson(bad, f.space), Error);
}

TEST_CASE("missing library weights are an error") {
  const auto& f = Fixture();
  const BlockLibrary empty(f.space, f.setup.config);
  try {
    ReplaceOneBlockScore(f.setup.parent, empty, 0, Subblock::kFfn, 1, ScoreMetric::Kl(f.eval));
    FAIL("expected missing weights");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kNotFound);
  }
}

TEST_CASE("stratified task split") {
  const MarkovMixture source(32, 4, 3, 8);
  const TaskPool pool = MakeTaskPool(source, 2, 3, 6, 4, 8);
  REQUIRE(pool.tasks.size() == 8);
  const TaskSplit s = SplitTaskPool(pool, 5);
  CHECK(s.half_a.tasks.size() == 4);
  CHECK(s.half_b.tasks.size() == 4);
  for (int c = 0; c < 4; ++c) {
    auto count = [&](const TaskPool& p) {
      return std::count_if(p.tasks.begin(), p.tasks.end(),
                           [&](const ProbeTask& t) { return t.category == c; });
    };
    CHECK(count(s.half_a) == 1);
    CHECK(count(s.half_b) == 1);
  }
  const TaskSplit again = SplitTaskPool(pool, 5);
  CHECK(TaskSetFingerprint(again.half_a.tasks) == TaskSetFingerprint(s.half_a.tasks));
  bool differs = false;
  for (std::uint64_t seed = 6; seed < 16 && !differs; ++seed) {
    differs = TaskSetFingerprint(SplitTaskPool(pool, seed).half_a.tasks) !=
              TaskSetFingerprint(s.half_a.tasks);
  }
  CHECK(differs);

  const TaskPool odd = MakeTaskPool(source, 3, 2, 6, 4, 8);
  const TaskSplit so = SplitTaskPool(odd, 1);
  CHECK(so.half_a.tasks.size() == 6);
  CHECK(so.half_b.tasks.size() == 6);

  const TaskPool thin = MakeTaskPool(source, 1, 2, 6, 4, 8);
  CHECK_THROWS_AS(SplitTaskPool(thin, 1), Error);
}

TEST_CASE("accuracy ledgers on the two halves") {
  const auto& f = Fixture();
  const MarkovMixture source(f.setup.config.vocab_size, 4, 3, 21);
  const TaskPool pool = MakeTaskPool(source, 2, 6, 8, 4, 3);
  const DownstreamSplitScores r = DownstreamTaskSplitScore(f.setup.parent, f.library, pool, 4);
  CHECK(r.half_a.polarity() == Polarity::kBenefit);
  CHECK(r.half_a.metric() == MetricKind::kDownstreamAccuracy);
  const double parent_acc = ProbeAccuracy(f.setup.parent, r.split.half_a.tasks);
  for (int l = 0; l < 2; ++l) {
    const int pa = f.space.parent_attention_index(l);
    CHECK(r.half_a.Subblock(l, Subblock::kAttention, pa) == parent_acc);
    CHECK(r.half_a.SubblockDegradation(l, Subblock::kAttention, pa, f.space) == 0.0);
  }
  CHECK(r.half_b.Subblock(0, Subblock::kFfn, 0) ==
        ProbeAccuracy(f.setup.parent, r.split.half_b.tasks));
  for (const ScoreEntry& e : r.half_a.entries()) {
    CHECK(e.value >= 0.0);
    CHECK(e.value <= 1.0);
  }
  CHECK(r.half_a.corpus_fingerprint() != r.half_b.corpus_fingerprint());
}
