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

#include "puzzle/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>

#include "puzzle/common.hpp"
#include "puzzle/losses.hpp"

namespace puzzle {

using nlohmann::json;

const char* MetricKindName(MetricKind kind) {
  switch (kind) {
    case MetricKind::kKlDivergence:
      return "kl";
    case MetricKind::kLmLoss:
      return "lm_loss";
    case MetricKind::kDownstreamAccuracy:
      break;
  }
  return "accuracy";
}

MetricKind ParseMetricKind(const std::string& name) {
  if (name == "kl") return MetricKind::kKlDivergence;
  if (name == "lm_loss") return MetricKind::kLmLoss;
  if (name == "accuracy") return MetricKind::kDownstreamAccuracy;
  Fail(ErrorCode::kInvalidArgument, "unknown metric '" + name + "'");
}

const char* PolarityName(Polarity p) { return p == Polarity::kCost ? "cost" : "benefit"; }

const char* GranularityName(ScoreGranularity g) {
  return g == ScoreGranularity::kSubblock ? "subblock" : "block";
}

ScoreGranularity ParseGranularity(const std::string& name) {
  if (name == "subblock") return ScoreGranularity::kSubblock;
  if (name == "block") return ScoreGranularity::kBlock;
  Fail(ErrorCode::kInvalidArgument, "unknown score granularity '" + name + "'");
}

namespace {

Polarity PolarityOf(MetricKind kind) {
  return kind == MetricKind::kDownstreamAccuracy ? Polarity::kBenefit : Polarity::kCost;
}

}  // namespace

ScoreMetric ScoreMetric::Kl(Corpus corpus) {
  ScoreMetric m;
  m.kind = MetricKind::kKlDivergence;
  m.corpus = std::move(corpus);
  return m;
}

ScoreMetric ScoreMetric::Lm(Corpus corpus) {
  ScoreMetric m;
  m.kind = MetricKind::kLmLoss;
  m.corpus = std::move(corpus);
  return m;
}

ScoreMetric ScoreMetric::Accuracy(std::vector<ProbeTask> tasks) {
  ScoreMetric m;
  m.kind = MetricKind::kDownstreamAccuracy;
  m.tasks = std::move(tasks);
  return m;
}

Polarity ScoreMetric::polarity() const { return PolarityOf(kind); }

void ScoreMetric::Validate() const {
  if (kind == MetricKind::kDownstreamAccuracy) {
    Require(!tasks.empty(), ErrorCode::kInvalidArgument, "accuracy metric needs tasks");
    for (const ProbeTask& t : tasks) {
      Require(!t.prompts.empty() && t.prompts.size() == t.answers.size() &&
                  t.prompts.size() == t.candidates.size(),
              ErrorCode::kInvalidArgument, "malformed probe task " + t.name);
    }
  } else {
    Require(!corpus.empty(), ErrorCode::kInvalidArgument, "metric needs a corpus");
    for (const Sequence& s : corpus) {
      Require(s.size() >= 2, ErrorCode::kInvalidArgument,
              "evaluation sequences need at least 2 tokens");
    }
  }
}

std::string TaskSetFingerprint(const std::vector<ProbeTask>& tasks) {
  Fnv1a h;
  auto put_int = [&](long long v) { h.Update(&v, sizeof(v)); };
  for (const ProbeTask& t : tasks) {
    h.Update(t.name);
    put_int(t.category);
    for (std::size_t p = 0; p < t.prompts.size(); ++p) {
      put_int(static_cast<long long>(t.prompts[p].size()));
      for (int tok : t.prompts[p]) put_int(tok);
      put_int(t.answers[p]);
      put_int(static_cast<long long>(t.candidates[p].size()));
      for (int c : t.candidates[p]) put_int(c);
    }
  }
  return h.hex();
}

std::string ScoreMetric::fingerprint() const {
  return kind == MetricKind::kDownstreamAccuracy ? TaskSetFingerprint(tasks)
                                                 : CorpusFingerprint(corpus);
}

namespace {

bool ProbeCorrect(const Matrix& logits, int answer, const std::vector<int>& candidates) {
  const Eigen::Index last = logits.rows() - 1;
  int best = candidates.front();
  for (int c : candidates) {
    if (logits(last, c) > logits(last, best)) best = c;
  }
  return best == answer;
}

}  // namespace

double ProbeAccuracy(const ToyTransformer& model, const std::vector<ProbeTask>& tasks) {
  Require(!tasks.empty(), ErrorCode::kInvalidArgument, "no probe tasks");
  double total = 0.0;
  for (const ProbeTask& t : tasks) {
    int correct = 0;
    for (std::size_t p = 0; p < t.prompts.size(); ++p) {
      correct += ProbeCorrect(Forward(model, t.prompts[p]).logits, t.answers[p],
                              t.candidates[p]);
    }
    total += static_cast<double>(correct) / static_cast<double>(t.prompts.size());
  }
  return total / static_cast<double>(tasks.size());
}

double EvaluateModel(const ToyTransformer& parent, const ToyTransformer& model,
                     const ScoreMetric& metric) {
  metric.Validate();
  switch (metric.kind) {
    case MetricKind::kKlDivergence:
      return CorpusKld(parent, model, metric.corpus);
    case MetricKind::kLmLoss:
      return CorpusLmLoss(model, metric.corpus);
    case MetricKind::kDownstreamAccuracy:
      break;
  }
  return ProbeAccuracy(model, metric.tasks);
}

// ---------------------------------------------------------------------------
// Ledger.

namespace {

constexpr int kKindAttention = 0;
constexpr int kKindFfn = 1;
constexpr int kKindBlock = 2;

int EntryKind(const ScoreEntry& e, ScoreGranularity g) {
  if (g == ScoreGranularity::kBlock) return kKindBlock;
  return e.subblock == Subblock::kAttention ? kKindAttention : kKindFfn;
}

}  // namespace

ScoreLedger::ScoreLedger(MetricKind metric, ScoreGranularity granularity,
                         std::string corpus_fingerprint, std::vector<ScoreEntry> entries)
    : metric_(metric),
      granularity_(granularity),
      corpus_fingerprint_(std::move(corpus_fingerprint)),
      entries_(std::move(entries)) {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const ScoreEntry& e = entries_[i];
    Require(std::isfinite(e.value), ErrorCode::kInvalidArgument,
            "non-finite score for " + e.variant_id);
    const int kind = EntryKind(e, granularity_);
    const int a = kind == kKindFfn ? -1 : e.attention;
    const int f = kind == kKindAttention ? -1 : e.ffn;
    const bool fresh = index_.emplace(std::make_tuple(e.layer, kind, a, f), i).second;
    Require(fresh, ErrorCode::kInvalidArgument,
            "duplicate ledger entry (layer " + std::to_string(e.layer) + ", " +
                e.variant_id + ")");
  }
}

Polarity ScoreLedger::polarity() const { return PolarityOf(metric_); }

const ScoreEntry* ScoreLedger::Find(int layer, int kind, int a, int f) const {
  auto it = index_.find(std::make_tuple(layer, kind, a, f));
  return it == index_.end() ? nullptr : &entries_[it->second];
}

double ScoreLedger::Subblock(int layer, puzzle::Subblock s, int index) const {
  Require(granularity_ == ScoreGranularity::kSubblock, ErrorCode::kInvalidArgument,
          "block-level ledger has no subblock scores");
  const ScoreEntry* e = s == Subblock::kAttention ? Find(layer, kKindAttention, index, -1)
                                                  : Find(layer, kKindFfn, -1, index);
  Require(e != nullptr, ErrorCode::kNotFound,
          "score ledger has no " + std::string(SubblockName(s)) + " entry " +
              std::to_string(index) + " at layer " + std::to_string(layer));
  return e->value;
}

double ScoreLedger::Block(int layer, int attention, int ffn) const {
  Require(granularity_ == ScoreGranularity::kBlock, ErrorCode::kInvalidArgument,
          "subblock-level ledger has no block scores");
  const ScoreEntry* e = Find(layer, kKindBlock, attention, ffn);
  Require(e != nullptr, ErrorCode::kNotFound,
          "score ledger has no block (" + std::to_string(attention) + ", " +
              std::to_string(ffn) + ") at layer " + std::to_string(layer));
  return e->value;
}

double ScoreLedger::SubblockDegradation(int layer, puzzle::Subblock s, int index,
                                        const SearchSpace& space) const {
  const int parent = s == Subblock::kAttention ? space.parent_attention_index(layer)
                                               : space.parent_ffn_index(layer);
  const double d = Subblock(layer, s, index) - Subblock(layer, s, parent);
  return polarity() == Polarity::kCost ? d : -d;
}

double ScoreLedger::BlockDegradation(int layer, int attention, int ffn,
                                     const SearchSpace& space) const {
  const double d = Block(layer, attention, ffn) -
                   Block(layer, space.parent_attention_index(layer),
                         space.parent_ffn_index(layer));
  return polarity() == Polarity::kCost ? d : -d;
}

void ScoreLedger::CheckComplete(const SearchSpace& space) const {
  for (int l = 0; l < space.num_layers(); ++l) {
    const LayerMenu& menu = space.layer(l);
    const int na = static_cast<int>(menu.attention.size());
    const int nf = static_cast<int>(menu.ffn.size());
    auto missing = [&](const std::string& id) {
      Fail(ErrorCode::kSchema,
           "score ledger missing (layer " + std::to_string(l) + ", " + id + ")");
    };
    if (granularity_ == ScoreGranularity::kSubblock) {
      for (int j = 0; j < na; ++j) {
        if (!Find(l, kKindAttention, j, -1)) missing(menu.attention[j].id());
      }
      for (int k = 0; k < nf; ++k) {
        if (!Find(l, kKindFfn, -1, k)) missing(menu.ffn[k].id());
      }
    } else {
      for (int j = 0; j < na; ++j) {
        for (int k = 0; k < nf; ++k) {
          if (!Find(l, kKindBlock, j, k)) {
            missing(menu.attention[j].id() + "+" + menu.ffn[k].id());
          }
        }
      }
    }
  }
}

json ScoreLedger::ToJson() const {
  json rows = json::array();
  for (const ScoreEntry& e : entries_) {
    rows.push_back({{"layer", e.layer},
                    {"subblock", granularity_ == ScoreGranularity::kBlock
                                     ? "block"
                                     : SubblockName(e.subblock)},
                    {"variant_id", e.variant_id},
                    {"metric", MetricKindName(metric_)},
                    {"polarity", PolarityName(polarity())},
                    {"value", e.value},
                    {"corpus_fingerprint", corpus_fingerprint_}});
  }
  return rows;
}

ScoreLedger ScoreLedger::FromJson(const json& wrapped, const SearchSpace& space) {
  // Either the bare row array or an object carrying it under "entries".
  const json& doc =
      wrapped.is_object() && wrapped.contains("entries") ? wrapped.at("entries") : wrapped;
  Require(doc.is_array(), ErrorCode::kSchema, "score ledger must be a JSON array");
  Require(!doc.empty(), ErrorCode::kSchema, "score ledger is empty");
  std::optional<MetricKind> metric;
  std::optional<ScoreGranularity> granularity;
  std::string fingerprint;
  std::vector<ScoreEntry> entries;
  int row = 0;
  for (const json& r : doc) {
    ++row;
    const std::string where = "ledger row " + std::to_string(row) + ": ";
    ScoreEntry e;
    std::string sub, id, metric_name, polarity_name, fp;
    try {
      e.layer = r.at("layer").get<int>();
      sub = r.at("subblock").get<std::string>();
      id = r.at("variant_id").get<std::string>();
      metric_name = r.at("metric").get<std::string>();
      polarity_name = r.at("polarity").get<std::string>();
      e.value = r.at("value").get<double>();
      fp = r.at("corpus_fingerprint").get<std::string>();
    } catch (const json::exception& ex) {
      Fail(ErrorCode::kSchema, where + ex.what());
    }
    Require(e.layer >= 0 && e.layer < space.num_layers(), ErrorCode::kSchema,
            where + "layer out of range");
    const MetricKind m = ParseMetricKind(metric_name);
    Require(!metric || *metric == m, ErrorCode::kSchema, where + "mixed metrics");
    metric = m;
    Require(polarity_name == PolarityName(PolarityOf(m)), ErrorCode::kSchema,
            where + "polarity does not match metric");
    Require(fingerprint.empty() || fingerprint == fp, ErrorCode::kSchema,
            where + "mixed corpus fingerprints");
    fingerprint = fp;
    const ScoreGranularity g =
        sub == "block" ? ScoreGranularity::kBlock : ScoreGranularity::kSubblock;
    Require(!granularity || *granularity == g, ErrorCode::kSchema,
            where + "mixed block and subblock rows");
    granularity = g;
    const LayerMenu& menu = space.layer(e.layer);
    auto attention_index = [&](const std::string& a) {
      for (std::size_t j = 0; j < menu.attention.size(); ++j) {
        if (menu.attention[j].id() == a) return static_cast<int>(j);
      }
      Fail(ErrorCode::kSchema, where + "unknown attention variant '" + a + "' at layer " +
                                   std::to_string(e.layer));
    };
    auto ffn_index = [&](const std::string& f) {
      for (std::size_t k = 0; k < menu.ffn.size(); ++k) {
        if (menu.ffn[k].id() == f) return static_cast<int>(k);
      }
      Fail(ErrorCode::kSchema, where + "unknown FFN variant '" + f + "' at layer " +
                                   std::to_string(e.layer));
    };
    if (g == ScoreGranularity::kBlock) {
      const auto plus = id.find('+');
      Require(plus != std::string::npos, ErrorCode::kSchema,
              where + "block variant_id needs attention+ffn");
      e.attention = attention_index(id.substr(0, plus));
      e.ffn = ffn_index(id.substr(plus + 1));
    } else {
      e.subblock = ParseSubblock(sub);
      if (e.subblock == Subblock::kAttention) {
        e.attention = attention_index(id);
      } else {
        e.ffn = ffn_index(id);
      }
    }
    e.variant_id = id;
    entries.push_back(std::move(e));
  }
  return ScoreLedger(*metric, *granularity, fingerprint, std::move(entries));
}

void ScoreLedger::Save(const std::string& path) const {
  std::ofstream out(path);
  Require(out.good(), ErrorCode::kIo, "cannot write " + path);
  out << ToJson().dump(2) << "\n";
}

ScoreLedger ScoreLedger::Load(const std::string& path, const SearchSpace& space) {
  std::ifstream in(path);
  Require(in.good(), ErrorCode::kIo, "cannot open " + path);
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    Fail(ErrorCode::kSchema, path + ": " + e.what());
  }
  return FromJson(doc, space);
}

std::string ScoreLedger::Fingerprint() const { return HexDigest(ToJson().dump()); }

// ---------------------------------------------------------------------------
// Resident parent.

ResidentModel::ResidentModel(const ToyTransformer& parent)
    : model_(parent),
      original_(parent.layers()),
      swapped_(parent.num_layers(), false),
      per_layer_(parent.num_layers(), 0) {}

void ResidentModel::Substitute(int layer, const Block& block) {
  Require(layer >= 0 && layer < model_.num_layers(), ErrorCode::kOutOfRange,
          "substitution layer out of range");
  Require(!swapped_[layer], ErrorCode::kInvalidArgument,
          "layer " + std::to_string(layer) + " is already substituted");
  model_.layer(layer) = block;
  swapped_[layer] = true;
  ++substitutions_;
  ++per_layer_[layer];
}

void ResidentModel::Restore(int layer) {
  Require(layer >= 0 && layer < model_.num_layers() && swapped_[layer],
          ErrorCode::kInvalidArgument, "layer is not substituted");
  model_.layer(layer) = original_[layer];
  swapped_[layer] = false;
}

// ---------------------------------------------------------------------------
// Scoring.

namespace {

struct Job {
  int layer = 0;
  int kind = kKindAttention;
  int attention = -1;
  int ffn = -1;
};

// Evaluation sequences with the parent's residual stream cached at every
// layer, so a swap at layer i only recomputes layers i..L-1.
class SwapEvaluator {
 public:
  SwapEvaluator(const ToyTransformer& parent, const ScoreMetric& metric) : metric_(metric) {
    metric.Validate();
    if (metric.kind == MetricKind::kDownstreamAccuracy) {
      for (std::size_t t = 0; t < metric.tasks.size(); ++t) {
        for (std::size_t p = 0; p < metric.tasks[t].prompts.size(); ++p) {
          sequences_.push_back(metric.tasks[t].prompts[p]);
          task_of_.push_back(static_cast<int>(t));
          prompt_of_.push_back(static_cast<int>(p));
        }
      }
    } else {
      sequences_ = metric.corpus;
      for (const Sequence& s : sequences_) targets_.push_back(NextTokenTargets(s));
    }
    acts_ = ParentActivations::Compute(parent, sequences_);
    if (metric.kind == MetricKind::kKlDivergence) {
      for (std::size_t s = 0; s < sequences_.size(); ++s) {
        parent_logits_.push_back(LogitsFrom(parent, 0, acts_.inputs[0][s]));
      }
    }
  }

  double Evaluate(const ToyTransformer& model, int layer) const {
    const std::size_t n = sequences_.size();
    switch (metric_.kind) {
      case MetricKind::kKlDivergence: {
        double total = 0.0;
        for (std::size_t s = 0; s < n; ++s) {
          total += KldLoss(parent_logits_[s], LogitsFrom(model, layer, acts_.inputs[layer][s]));
        }
        return total / static_cast<double>(n);
      }
      case MetricKind::kLmLoss: {
        double total = 0.0;
        for (std::size_t s = 0; s < n; ++s) {
          total += LmLoss(LogitsFrom(model, layer, acts_.inputs[layer][s]), targets_[s]);
        }
        return total / static_cast<double>(n);
      }
      case MetricKind::kDownstreamAccuracy:
        break;
    }
    std::vector<int> correct(metric_.tasks.size(), 0);
    for (std::size_t s = 0; s < n; ++s) {
      const ProbeTask& t = metric_.tasks[task_of_[s]];
      correct[task_of_[s]] += ProbeCorrect(LogitsFrom(model, layer, acts_.inputs[layer][s]),
                                           t.answers[prompt_of_[s]],
                                           t.candidates[prompt_of_[s]]);
    }
    double total = 0.0;
    for (std::size_t t = 0; t < correct.size(); ++t) {
      total += static_cast<double>(correct[t]) /
               static_cast<double>(metric_.tasks[t].prompts.size());
    }
    return total / static_cast<double>(correct.size());
  }

 private:
  const ScoreMetric& metric_;
  Corpus sequences_;
  std::vector<std::vector<int>> targets_;
  std::vector<int> task_of_, prompt_of_;
  ParentActivations acts_;
  std::vector<Matrix> parent_logits_;
};

Block SwapBlock(const ToyTransformer& parent, const BlockLibrary& library, const Job& job) {
  if (job.kind == kKindBlock) return library.Compose(job.layer, job.attention, job.ffn);
  Block b = parent.layer(job.layer);
  if (job.kind == kKindAttention) {
    b.attention = library.attention(job.layer, job.attention);
  } else {
    b.ffn = library.ffn(job.layer, job.ffn);
  }
  return b;
}

double RunJob(const ToyTransformer& parent, const BlockLibrary& library,
              const SwapEvaluator& eval, ResidentModel& resident, const Job& job) {
  resident.Substitute(job.layer, SwapBlock(parent, library, job));
  double v = 0.0;
  try {
    v = eval.Evaluate(resident.model(), job.layer);
  } catch (...) {
    resident.Restore(job.layer);
    throw;
  }
  resident.Restore(job.layer);
  return v;
}

void CheckLibrary(const ToyTransformer& parent, const BlockLibrary& library) {
  Require(library.space().num_layers() == parent.num_layers(), ErrorCode::kShapeMismatch,
          "library and parent layer counts differ");
}

}  // namespace

double ReplaceOneBlockScore(const ToyTransformer& parent, const BlockLibrary& library,
                            int layer, Subblock s, int index, const ScoreMetric& metric) {
  CheckLibrary(parent, library);
  const Job job{layer, s == Subblock::kAttention ? kKindAttention : kKindFfn,
                s == Subblock::kAttention ? index : -1, s == Subblock::kFfn ? index : -1};
  const SwapEvaluator eval(parent, metric);
  ResidentModel resident(parent);
  return RunJob(parent, library, eval, resident, job);
}

double ReplaceOneBlockScore(const ToyTransformer& parent, const BlockLibrary& library,
                            int layer, int attention, int ffn, const ScoreMetric& metric) {
  CheckLibrary(parent, library);
  const SwapEvaluator eval(parent, metric);
  ResidentModel resident(parent);
  return RunJob(parent, library, eval, resident, Job{layer, kKindBlock, attention, ffn});
}

ScoreLedger ScoreFullSpace(const ToyTransformer& parent, const BlockLibrary& library,
                           const ScoreMetric& metric, const ScoreOptions& options,
                           ScoringStats* stats) {
  CheckLibrary(parent, library);
  const SearchSpace& space = library.space();
  std::vector<Job> jobs;
  std::vector<ScoreEntry> entries;
  for (int l = 0; l < space.num_layers(); ++l) {
    const LayerMenu& menu = space.layer(l);
    const int na = static_cast<int>(menu.attention.size());
    const int nf = static_cast<int>(menu.ffn.size());
    if (options.granularity == ScoreGranularity::kSubblock) {
      for (int j = 0; j < na; ++j) {
        jobs.push_back({l, kKindAttention, j, -1});
        entries.push_back({l, Subblock::kAttention, j, -1, menu.attention[j].id(), 0.0});
      }
      for (int k = 0; k < nf; ++k) {
        jobs.push_back({l, kKindFfn, -1, k});
        entries.push_back({l, Subblock::kFfn, -1, k, menu.ffn[k].id(), 0.0});
      }
    } else {
      for (int j = 0; j < na; ++j) {
        for (int k = 0; k < nf; ++k) {
          jobs.push_back({l, kKindBlock, j, k});
          entries.push_back({l, Subblock::kAttention, j, k,
                             menu.attention[j].id() + "+" + menu.ffn[k].id(), 0.0});
        }
      }
    }
  }
  const int n = static_cast<int>(jobs.size());
  std::vector<int> order = options.order;
  if (order.empty()) {
    order.resize(n);
    std::iota(order.begin(), order.end(), 0);
  }
  {
    std::vector<int> sorted = order;
    std::sort(sorted.begin(), sorted.end());
    std::vector<int> ident(n);
    std::iota(ident.begin(), ident.end(), 0);
    Require(sorted == ident, ErrorCode::kInvalidArgument,
            "scoring order must be a permutation of the ledger entries");
  }

  const SwapEvaluator eval(parent, metric);
  const int workers = std::max(1, std::min(options.workers, std::max(n, 1)));
  std::vector<ResidentModel> residents;
  residents.reserve(workers);
  for (int w = 0; w < workers; ++w) residents.emplace_back(parent);
  std::vector<double> values(n, 0.0);
  ParallelFor(workers, workers, [&](int w) {
    for (int pos = w; pos < n; pos += workers) {
      const int i = order[pos];
      values[i] = RunJob(parent, library, eval, residents[w], jobs[i]);
    }
  });
  for (int i = 0; i < n; ++i) entries[i].value = values[i];

  if (stats != nullptr) {
    *stats = ScoringStats{};
    stats->evaluations = n;
    stats->resident_models = workers;
    stats->substitutions_per_layer.assign(parent.num_layers(), 0);
    for (const ResidentModel& r : residents) {
      stats->substitutions += r.substitutions();
      for (int l = 0; l < parent.num_layers(); ++l) {
        stats->substitutions_per_layer[l] += r.substitutions_per_layer()[l];
      }
    }
  }
  return ScoreLedger(metric.kind, options.granularity, metric.fingerprint(),
                     std::move(entries));
}

double EstimateArchitectureQuality(const ScoreLedger& ledger, const Architecture& arch) {
  double total = 0.0;
  for (std::size_t l = 0; l < arch.choices.size(); ++l) {
    const int layer = static_cast<int>(l);
    const LayerChoice& c = arch.choices[l];
    if (ledger.granularity() == ScoreGranularity::kSubblock) {
      total += ledger.Subblock(layer, Subblock::kAttention, c.attention) +
               ledger.Subblock(layer, Subblock::kFfn, c.ffn);
    } else {
      total += ledger.Block(layer, c.attention, c.ffn);
    }
  }
  return total;
}

TaskSplit SplitTaskPool(const TaskPool& pool, std::uint64_t split_seed) {
  Require(pool.num_categories >= 2, ErrorCode::kInvalidArgument,
          "task split needs at least 2 categories");
  std::vector<std::vector<int>> by_category(pool.num_categories);
  for (std::size_t t = 0; t < pool.tasks.size(); ++t) {
    const int c = pool.tasks[t].category;
    Require(c >= 0 && c < pool.num_categories, ErrorCode::kInvalidArgument,
            "task " + pool.tasks[t].name + " has an out-of-range category");
    by_category[c].push_back(static_cast<int>(t));
  }
  TaskSplit split;
  split.half_a.num_categories = split.half_b.num_categories = pool.num_categories;
  bool extra_to_a = true;
  for (int c = 0; c < pool.num_categories; ++c) {
    std::vector<int>& ids = by_category[c];
    Require(ids.size() >= 2, ErrorCode::kInvalidArgument,
            "category " + std::to_string(c) + " has fewer than 2 tasks");
    Rng rng(MixSeed(split_seed, static_cast<std::uint64_t>(c)));
    for (int i = static_cast<int>(ids.size()) - 1; i > 0; --i) {
      std::swap(ids[i], ids[UniformIndex(rng, i + 1)]);
    }
    std::size_t take = ids.size() / 2;
    if (ids.size() % 2 == 1) {
      if (extra_to_a) ++take;
      extra_to_a = !extra_to_a;
    }
    // Keep the pool's original order inside each half.
    std::vector<int> a(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(take));
    std::vector<int> b(ids.begin() + static_cast<std::ptrdiff_t>(take), ids.end());
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    for (int t : a) split.half_a.tasks.push_back(pool.tasks[t]);
    for (int t : b) split.half_b.tasks.push_back(pool.tasks[t]);
  }
  return split;
}

DownstreamSplitScores DownstreamTaskSplitScore(const ToyTransformer& parent,
                                               const BlockLibrary& library,
                                               const TaskPool& pool,
                                               std::uint64_t split_seed,
                                               const ScoreOptions& options) {
  DownstreamSplitScores out;
  out.split = SplitTaskPool(pool, split_seed);
  out.half_a =
      ScoreFullSpace(parent, library, ScoreMetric::Accuracy(out.split.half_a.tasks), options);
  out.half_b =
      ScoreFullSpace(parent, library, ScoreMetric::Accuracy(out.split.half_b.tasks), options);
  return out;
}

namespace {

std::vector<double> AverageRanks(const std::vector<double>& x) {
  const std::size_t n = x.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double SpearmanRho(const std::vector<double>& x, const std::vector<double>& y) {
  Require(x.size() == y.size() && x.size() >= 2, ErrorCode::kInvalidArgument,
          "Spearman needs two equal-length samples of size >= 2");
  const std::vector<double> rx = AverageRanks(x);
  const std::vector<double> ry = AverageRanks(y);
  const double n = static_cast<double>(x.size());
  const double mean = (n + 1.0) / 2.0;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (rx[i] - mean) * (ry[i] - mean);
    sxx += (rx[i] - mean) * (rx[i] - mean);
    syy += (ry[i] - mean) * (ry[i] - mean);
  }
  Require(sxx > 0 && syy > 0, ErrorCode::kDegenerate, "Spearman of a constant sample");
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace puzzle
