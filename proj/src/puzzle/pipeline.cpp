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

#include "puzzle/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

namespace puzzle {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// File helpers.

std::string ReadTextFile(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  Require(in.good(), ErrorCode::kIo, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void WriteTextFile(const std::string& path, const std::string& text) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary);
  Require(out.good(), ErrorCode::kIo, "cannot write " + path);
  out << text;
  Require(out.good(), ErrorCode::kIo, "write failed for " + path);
}

json ReadJsonFile(const std::string& path) {
  const std::string text = ReadTextFile(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    Fail(ErrorCode::kSchema, path + ": " + e.what());
  }
}

void WriteJsonFile(const std::string& path, const json& doc) {
  WriteTextFile(path, doc.dump(2) + "\n");
}

std::string JsonFingerprint(const json& doc) { return HexDigest(doc.dump()); }

namespace {

std::string Resolve(const std::string& base, const std::string& p) {
  if (p.empty()) return p;
  const fs::path q(p);
  if (q.is_absolute()) return q.lexically_normal().string();
  return (fs::path(base) / q).lexically_normal().string();
}

json OptionalNumber(const std::optional<double>& v) {
  return v ? json(*v) : json(nullptr);
}

std::optional<double> ReadOptional(const json& doc, const char* key) {
  if (!doc.contains(key) || doc.at(key).is_null()) return std::nullopt;
  return doc.at(key).get<double>();
}

bool SafeName(const std::string& s) {
  if (s.empty()) return false;
  for (char c : s) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-')) {
      return false;
    }
  }
  return true;
}

std::string Num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string Short(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration.

json PipelineSeeds::ToJson() const {
  return {{"corpus", corpus}, {"parent", parent},   {"bld", bld},
          {"scoring", scoring}, {"gkd", gkd}, {"baselines", baselines}};
}

PipelineSeeds PipelineSeeds::FromJson(const json& doc) {
  Require(doc.is_object(), ErrorCode::kSchema, "seeds must be an object");
  PipelineSeeds s;
  auto get = [&](const char* key, std::uint64_t* out) {
    Require(doc.contains(key), ErrorCode::kSchema,
            std::string("seeds: missing mandatory '") + key + "'");
    *out = doc.at(key).get<std::uint64_t>();
  };
  get("corpus", &s.corpus);
  get("parent", &s.parent);
  get("bld", &s.bld);
  get("scoring", &s.scoring);
  get("gkd", &s.gkd);
  get("baselines", &s.baselines);
  return s;
}

json SliceSpec::ToJson() const {
  json j = {{"name", name},
            {"batches", batches},
            {"max_batch", max_batch},
            {"limits", limits.ToJson()},
            {"relative", nullptr}};
  if (relative) {
    j["relative"] = {{"reference_batch", relative->reference_batch},
                     {"throughput_factor", OptionalNumber(relative->throughput_factor)},
                     {"memory_factor", OptionalNumber(relative->memory_factor)},
                     {"latency_factor", OptionalNumber(relative->latency_factor)}};
  }
  return j;
}

SliceSpec SliceSpec::FromJson(const json& doc) {
  SliceSpec s;
  s.name = doc.at("name").get<std::string>();
  if (doc.contains("batches")) s.batches = doc.at("batches").get<std::vector<int>>();
  s.max_batch = doc.value("max_batch", 0);
  if (doc.contains("limits")) s.limits = Limits::FromJson(doc.at("limits"));
  if (doc.contains("relative") && !doc.at("relative").is_null()) {
    const json& r = doc.at("relative");
    RelativeLimits rel;
    rel.reference_batch = r.value("reference_batch", 1);
    rel.throughput_factor = ReadOptional(r, "throughput_factor");
    rel.memory_factor = ReadOptional(r, "memory_factor");
    rel.latency_factor = ReadOptional(r, "latency_factor");
    s.relative = rel;
  }
  return s;
}

PipelineConfig PipelineConfig::FromJson(const json& doc, const std::string& base_dir) {
  PipelineConfig c;
  try {
    Require(doc.is_object(), ErrorCode::kSchema, "pipeline config must be a JSON object");
    Require(doc.contains("seeds"), ErrorCode::kSchema,
            "pipeline config: missing mandatory 'seeds'");
    c.seeds = PipelineSeeds::FromJson(doc.at("seeds"));
    if (doc.contains("output_dir")) {
      c.output_dir = Resolve(base_dir, doc.at("output_dir").get<std::string>());
    } else {
      c.output_dir = Resolve(base_dir, c.output_dir);
    }
    c.workers = doc.value("workers", c.workers);
    if (doc.contains("model")) c.model = ModelConfig::FromJson(doc.at("model"));
    if (doc.contains("space") && !doc.at("space").is_null()) {
      const json& s = doc.at("space");
      c.space = s.is_string() ? SearchSpace::Load(Resolve(base_dir, s.get<std::string>()))
                              : SearchSpace::FromJson(s);
    }
    if (doc.contains("corpus")) {
      const json& s = doc.at("corpus");
      CorpusSpec& k = c.corpus;
      k.num_chains = s.value("num_chains", k.num_chains);
      k.branching = s.value("branching", k.branching);
      k.sequence_length = s.value("sequence_length", k.sequence_length);
      k.train_sequences = s.value("train_sequences", k.train_sequences);
      k.heldout_sequences = s.value("heldout_sequences", k.heldout_sequences);
      k.score_sequences = s.value("score_sequences", k.score_sequences);
      k.eval_sequences = s.value("eval_sequences", k.eval_sequences);
    }
    if (doc.contains("tasks")) {
      const json& s = doc.at("tasks");
      TaskSpec& t = c.tasks;
      t.tasks_per_category = s.value("tasks_per_category", t.tasks_per_category);
      t.prompts_per_task = s.value("prompts_per_task", t.prompts_per_task);
      t.prompt_len = s.value("prompt_len", t.prompt_len);
      t.candidates = s.value("candidates", t.candidates);
    }
    if (doc.contains("parent")) {
      const json& s = doc.at("parent");
      c.parent.steps = s.value("steps", c.parent.steps);
      c.parent.lr = s.value("lr", c.parent.lr);
      c.parent.batch_size = s.value("batch_size", c.parent.batch_size);
      if (s.contains("load") && !s.at("load").is_null()) {
        c.parent_path = Resolve(base_dir, s.at("load").get<std::string>());
      }
    }
    if (doc.contains("bld")) {
      const json& s = doc.at("bld");
      if (s.contains("mode")) c.bld_mode = ParseBldMode(s.at("mode").get<std::string>());
      c.bld_budget.steps = s.value("steps", c.bld_budget.steps);
      c.bld_budget.lr = s.value("lr", c.bld_budget.lr);
      c.bld_budget.batch_size = s.value("batch_size", c.bld_budget.batch_size);
      c.bld_budget.eval_every = s.value("eval_every", c.bld_budget.eval_every);
      c.calibration_tokens = s.value("calibration_tokens", c.calibration_tokens);
    }
    if (doc.contains("scoring")) {
      const json& s = doc.at("scoring");
      if (s.contains("metric")) c.metric = ParseMetricKind(s.at("metric").get<std::string>());
      if (s.contains("granularity")) {
        c.granularity = ParseGranularity(s.at("granularity").get<std::string>());
      }
    }
    if (doc.contains("resources")) {
      const json& s = doc.at("resources");
      if (s.contains("scenario")) c.scenario = Scenario::FromJson(s.at("scenario"));
      if (s.contains("hardware")) c.hardware = HardwareProfile::FromJson(s.at("hardware"));
      if (s.contains("batches")) c.batches = s.at("batches").get<std::vector<int>>();
      if (s.contains("measurements") && !s.at("measurements").is_null()) {
        c.measurements_path = Resolve(base_dir, s.at("measurements").get<std::string>());
      }
    }
    if (doc.contains("slices")) {
      for (const json& s : doc.at("slices")) c.slices.push_back(SliceSpec::FromJson(s));
    }
    if (doc.contains("search")) {
      const json& s = doc.at("search");
      c.alpha = s.value("alpha", c.alpha);
      c.num_solutions = s.value("num_solutions", c.num_solutions);
      if (s.contains("encoding")) c.encoding = ParseEncoding(s.at("encoding").get<std::string>());
    }
    if (doc.contains("gkd")) {
      const json& s = doc.at("gkd");
      c.gkd_enabled = s.value("enabled", c.gkd_enabled);
      c.gkd_loss = GkdLossSpec::Make(s.value("lm", c.gkd_loss.use_lm),
                                     s.value("cosine", c.gkd_loss.use_cosine),
                                     s.value("kld", c.gkd_loss.use_kld));
      c.gkd_budget.steps = s.value("steps", c.gkd_budget.steps);
      c.gkd_budget.lr = s.value("lr", c.gkd_budget.lr);
      c.gkd_budget.batch_size = s.value("batch_size", c.gkd_budget.batch_size);
      c.gkd_budget.eval_every = s.value("eval_every", c.gkd_budget.eval_every);
    }
    if (doc.contains("heatmap")) {
      const json& s = doc.at("heatmap");
      c.heatmap_batch = s.value("batch", c.heatmap_batch);
      if (s.contains("throughput_factors")) {
        c.heatmap_throughput_factors = s.at("throughput_factors").get<std::vector<double>>();
      }
    }
    if (doc.contains("baselines")) {
      const json& s = doc.at("baselines");
      c.baselines_enabled = s.value("enabled", c.baselines_enabled);
      c.random_attempts = s.value("random_attempts", c.random_attempts);
    }
  } catch (const json::exception& e) {
    Fail(ErrorCode::kSchema, std::string("pipeline config: ") + e.what());
  }
  c.parent.seed = c.seeds.parent;
  c.gkd_budget.seed = c.seeds.gkd;
  c.Validate();
  return c;
}

PipelineConfig PipelineConfig::Load(const std::string& path) {
  const fs::path p(path);
  const std::string base = p.has_parent_path() ? p.parent_path().string() : ".";
  return FromJson(ReadJsonFile(path), base);
}

json PipelineConfig::ToJson() const {
  json slices_json = json::array();
  for (const SliceSpec& s : slices) slices_json.push_back(s.ToJson());
  return {
      {"version", 1},
      {"output_dir", output_dir},
      {"workers", workers},
      {"seeds", seeds.ToJson()},
      {"model", model.ToJson()},
      {"space", space ? space->ToJson() : json(nullptr)},
      {"corpus",
       {{"num_chains", corpus.num_chains},
        {"branching", corpus.branching},
        {"sequence_length", corpus.sequence_length},
        {"train_sequences", corpus.train_sequences},
        {"heldout_sequences", corpus.heldout_sequences},
        {"score_sequences", corpus.score_sequences},
        {"eval_sequences", corpus.eval_sequences}}},
      {"tasks",
       {{"tasks_per_category", tasks.tasks_per_category},
        {"prompts_per_task", tasks.prompts_per_task},
        {"prompt_len", tasks.prompt_len},
        {"candidates", tasks.candidates}}},
      {"parent",
       {{"steps", parent.steps},
        {"lr", parent.lr},
        {"batch_size", parent.batch_size},
        {"load", parent_path.empty() ? json(nullptr) : json(parent_path)}}},
      {"bld",
       {{"mode", BldModeName(bld_mode)},
        {"steps", bld_budget.steps},
        {"lr", bld_budget.lr},
        {"batch_size", bld_budget.batch_size},
        {"eval_every", bld_budget.eval_every},
        {"calibration_tokens", calibration_tokens}}},
      {"scoring",
       {{"metric", MetricKindName(metric)}, {"granularity", GranularityName(granularity)}}},
      {"resources",
       {{"scenario", scenario.ToJson()},
        {"hardware", hardware.ToJson()},
        {"batches", batches},
        {"measurements",
         measurements_path.empty() ? json(nullptr) : json(measurements_path)}}},
      {"slices", slices_json},
      {"search",
       {{"alpha", alpha}, {"num_solutions", num_solutions}, {"encoding", EncodingName(encoding)}}},
      {"gkd",
       {{"enabled", gkd_enabled},
        {"lm", gkd_loss.use_lm},
        {"cosine", gkd_loss.use_cosine},
        {"kld", gkd_loss.use_kld},
        {"steps", gkd_budget.steps},
        {"lr", gkd_budget.lr},
        {"batch_size", gkd_budget.batch_size},
        {"eval_every", gkd_budget.eval_every}}},
      {"heatmap", {{"batch", heatmap_batch}, {"throughput_factors", heatmap_throughput_factors}}},
      {"baselines", {{"enabled", baselines_enabled}, {"random_attempts", random_attempts}}}};
}

namespace {

// Config with machine-specific entries replaced by content digests.
json HashableConfig(const PipelineConfig& c) {
  json j = c.ToJson();
  j.erase("output_dir");
  j.erase("workers");
  j["space"] = c.ResolvedSpace().ToJson();
  if (!c.parent_path.empty()) j["parent"]["load"] = HexDigest(ReadTextFile(c.parent_path));
  if (!c.measurements_path.empty()) {
    j["resources"]["measurements"] = HexDigest(ReadTextFile(c.measurements_path));
  }
  return j;
}

}  // namespace

std::string PipelineConfig::Hash() const { return JsonFingerprint(HashableConfig(*this)); }

SearchSpace PipelineConfig::ResolvedSpace() const {
  if (space) return *space;
  return SearchSpace::Default(model.num_layers, model.parent_shape());
}

void PipelineConfig::Validate() const {
  auto check = [](bool ok, const std::string& what) {
    Require(ok, ErrorCode::kInvalidArgument, "pipeline config: " + what);
  };
  model.Validate();
  check(workers >= 1, "workers must be >= 1");
  if (space) {
    check(space->parent() == model.parent_shape(),
          "search space parent shape does not match the model");
    check(space->num_layers() == model.num_layers,
          "search space layer count does not match the model");
  }
  check(corpus.num_chains >= 2 && corpus.branching >= 1, "corpus needs >= 2 chains");
  check(corpus.sequence_length >= 2 && corpus.sequence_length <= model.max_seq_len,
        "sequence_length must be in [2, max_seq_len]");
  check(corpus.train_sequences >= 1 && corpus.heldout_sequences >= 1 &&
            corpus.score_sequences >= 1 && corpus.eval_sequences >= 1,
        "corpus sizes must be positive");
  check(tasks.tasks_per_category >= 2, "tasks_per_category must be >= 2");
  check(tasks.prompts_per_task >= 1 && tasks.candidates >= 2, "task sizes too small");
  check(tasks.prompt_len >= 2 && tasks.prompt_len <= model.max_seq_len,
        "prompt_len must be in [2, max_seq_len]");
  check(parent.steps >= 0 && parent.batch_size >= 1 && parent.lr > 0,
        "parent training budget invalid");
  check(bld_budget.steps >= 0 && bld_budget.batch_size >= 1 && bld_budget.eval_every >= 1 &&
            bld_budget.lr > 0,
        "BLD budget invalid");
  check(calibration_tokens >= 1, "calibration_tokens must be positive");
  scenario.Validate();
  hardware.Validate();
  check(!batches.empty(), "resource batches are empty");
  for (int b : batches) check(b >= 1, "batch sizes must be >= 1");
  std::set<std::string> names;
  for (const SliceSpec& s : slices) {
    check(SafeName(s.name), "slice name '" + s.name + "' must be [A-Za-z0-9_-]+");
    check(names.insert(s.name).second, "duplicate slice name '" + s.name + "'");
    for (int b : s.batches) check(b >= 1, "slice " + s.name + ": batch sizes must be >= 1");
    check(s.max_batch >= 0, "slice " + s.name + ": max_batch must be >= 0");
    s.limits.Validate();
    if (s.relative) {
      check(s.relative->reference_batch >= 1, "slice " + s.name + ": reference_batch < 1");
      for (const auto& f : {s.relative->throughput_factor, s.relative->memory_factor,
                            s.relative->latency_factor}) {
        check(!f || (std::isfinite(*f) && *f > 0),
              "slice " + s.name + ": relative factors must be positive");
      }
    }
  }
  check(alpha >= 0.0 && alpha <= 1.0, "alpha must be in [0, 1]");
  check(num_solutions >= 1, "num_solutions must be >= 1");
  gkd_loss.Validate();
  check(gkd_budget.steps >= 0 && gkd_budget.batch_size >= 1 && gkd_budget.eval_every >= 1 &&
            gkd_budget.lr > 0,
        "GKD budget invalid");
  check(heatmap_batch >= 1, "heatmap batch must be >= 1");
  for (double f : heatmap_throughput_factors) {
    check(std::isfinite(f) && f > 0, "heatmap throughput factors must be positive");
  }
  check(random_attempts >= 1, "random_attempts must be >= 1");
}

PipelineData PipelineData::Make(const PipelineConfig& config) {
  const CorpusSpec& c = config.corpus;
  const std::uint64_t seed = config.seeds.corpus;
  MarkovMixture source(config.model.vocab_size, c.num_chains, c.branching, seed);
  PipelineData d;
  d.train = MakeCorpus(source, c.train_sequences, c.sequence_length, MixSeed(seed, 1));
  d.heldout = MakeCorpus(source, c.heldout_sequences, c.sequence_length, MixSeed(seed, 2));
  d.score = MakeCorpus(source, c.score_sequences, c.sequence_length, MixSeed(seed, 3));
  d.eval = MakeCorpus(source, c.eval_sequences, c.sequence_length, MixSeed(seed, 4));
  const TaskSpec& t = config.tasks;
  d.pool = MakeTaskPool(source, t.tasks_per_category, t.prompts_per_task, t.prompt_len,
                        t.candidates, MixSeed(seed, 5));
  d.split = SplitTaskPool(d.pool, config.seeds.scoring);
  return d;
}

std::vector<int> TableBatches(const PipelineConfig& c) {
  std::set<int> b(c.batches.begin(), c.batches.end());
  for (const SliceSpec& s : c.slices) {
    b.insert(s.batches.begin(), s.batches.end());
    if (s.relative) b.insert(s.relative->reference_batch);
  }
  if (!c.heatmap_throughput_factors.empty()) b.insert(c.heatmap_batch);
  return {b.begin(), b.end()};
}

ToyTransformer RunParentStage(const PipelineConfig& config, const PipelineData& data,
                              std::vector<double>* losses) {
  ParentTrainConfig pt = config.parent;
  pt.seed = config.seeds.parent;
  return TrainParent(config.model, data.train, pt, losses);
}

BlockLibrary RunLibraryStage(const PipelineConfig& config, const ToyTransformer& parent,
                             const SearchSpace& space, const PipelineData& data,
                             bool init_only) {
  if (init_only) {
    return BuildInitLibrary(parent, space, data.train, config.calibration_tokens);
  }
  BldOptions opt;
  opt.budget = config.bld_budget;
  opt.seed = config.seeds.bld;
  opt.workers = config.workers;
  opt.calibration_tokens = config.calibration_tokens;
  return RunBld(parent, space, config.bld_mode, data.train, data.heldout, opt);
}

ResourceTable RunResourceStage(const PipelineConfig& config, const SearchSpace& space) {
  ResourceTable table =
      config.measurements_path.empty()
          ? BuildAnalyticTable(space, config.scenario, TableBatches(config), config.hardware)
          : LoadMeasurements(config.measurements_path, space);
  table.CheckComplete(space);
  return table;
}

ScoreLedger RunScoringStage(const PipelineConfig& config, const ToyTransformer& parent,
                            const BlockLibrary& library, const PipelineData& data) {
  ScoreMetric metric;
  switch (config.metric) {
    case MetricKind::kKlDivergence:
      metric = ScoreMetric::Kl(data.score);
      break;
    case MetricKind::kLmLoss:
      metric = ScoreMetric::Lm(data.score);
      break;
    case MetricKind::kDownstreamAccuracy:
      metric = ScoreMetric::Accuracy(data.split.half_a.tasks);
      break;
  }
  ScoreOptions opt;
  opt.granularity = config.granularity;
  opt.workers = config.workers;
  return ScoreFullSpace(parent, library, metric, opt);
}

GkdResult RunGkdStage(const PipelineConfig& config, const ToyTransformer& parent,
                      const ToyTransformer& child, const PipelineData& data,
                      std::uint64_t seed) {
  GkdBudget budget = config.gkd_budget;
  budget.seed = seed;
  return RunGkd(child, parent, config.gkd_loss, data.train, data.heldout, budget);
}

// ---------------------------------------------------------------------------
// Metrics, weights and ratios.

json ModelMetrics::ToJson() const {
  return {{"lm_loss", lm_loss},           {"kl", kl},
          {"accuracy", accuracy},         {"mtbench_proxy", mtbench_proxy},
          {"mmlu_proxy", mmlu_proxy},     {"composite", composite}};
}

ModelMetrics EvaluateMetrics(const ToyTransformer& parent, const ToyTransformer& model,
                             const Corpus& eval, const std::vector<ProbeTask>& tasks) {
  ModelMetrics m;
  m.lm_loss = CorpusLmLoss(model, eval);
  m.kl = CorpusKld(parent, model, eval);
  m.accuracy = tasks.empty() ? 0.0 : ProbeAccuracy(model, tasks);
  m.mtbench_proxy = 10.0 * std::exp(-m.kl);
  m.mmlu_proxy = 100.0 * m.accuracy;
  m.composite = (m.mtbench_proxy * 10.0 + m.mmlu_proxy) / 2.0;
  return m;
}

Block RandomizeBlockWeights(const Block& block, Rng& rng) {
  Block out = block;
  auto redraw = [&](Matrix& m, double sd) {
    if (m.size() > 0) FillNormal(m, sd, rng);
  };
  auto in_sd = [](const Matrix& m) { return 1.0 / std::sqrt(static_cast<double>(m.rows())); };
  auto out_sd = [](const Matrix& m) {
    return 0.5 / std::sqrt(static_cast<double>(m.rows()));
  };
  AttentionBlock& a = out.attention;
  if (a.kind == AttentionKind::kGqa) {
    redraw(a.gqa.w_q, in_sd(a.gqa.w_q));
    redraw(a.gqa.w_k, in_sd(a.gqa.w_k));
    redraw(a.gqa.w_v, in_sd(a.gqa.w_v));
    redraw(a.gqa.w_o, out_sd(a.gqa.w_o));
  } else if (a.kind == AttentionKind::kLinear) {
    redraw(a.linear, in_sd(a.linear));
  }
  if (a.norm.size() > 0) a.norm.setOnes();
  FfnBlock& f = out.ffn;
  if (f.kind == FfnKind::kGated) {
    redraw(f.gated.w_up, in_sd(f.gated.w_up));
    redraw(f.gated.w_gate, in_sd(f.gated.w_gate));
    redraw(f.gated.w_down, out_sd(f.gated.w_down));
  } else if (f.kind == FfnKind::kLinear) {
    redraw(f.linear, in_sd(f.linear));
  }
  if (f.norm.size() > 0) f.norm.setOnes();
  return out;
}

RuntimeRatios ComputeRuntimeRatios(const SearchSpace& space, const ResourceTable& table,
                                   const Architecture& arch, int batch) {
  table.CheckComplete(space);
  const ValidityReport v = ValidateArchitecture(space, arch);
  Require(v.valid, ErrorCode::kInvalidArgument, "invalid architecture: " + v.reason);
  RuntimeRatios r;
  for (int l = 0; l < space.num_layers(); ++l) {
    auto ratio = [&](Subblock s, int child, int parent) {
      const double base = table.runtime(l, s, parent, batch).runtime.total();
      Require(base > 0, ErrorCode::kDegenerate,
              "parent runtime is zero at layer " + std::to_string(l));
      return table.runtime(l, s, child, batch).runtime.total() / base;
    };
    const LayerChoice& c = arch.choices[l];
    r.attention.push_back(c.attention == space.parent_attention_index(l)
                              ? 1.0
                              : ratio(Subblock::kAttention, c.attention,
                                      space.parent_attention_index(l)));
    r.ffn.push_back(c.ffn == space.parent_ffn_index(l)
                        ? 1.0
                        : ratio(Subblock::kFfn, c.ffn, space.parent_ffn_index(l)));
  }
  return r;
}

namespace {

std::string MatrixCsv(const std::vector<double>& targets,
                      const std::vector<std::vector<double>>& rows) {
  std::ostringstream out;
  out << "throughput_target";
  const std::size_t layers = rows.empty() ? 0 : rows.front().size();
  for (std::size_t l = 0; l < layers; ++l) out << ",layer_" << l;
  out << "\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out << Num(targets[i]);
    for (double v : rows[i]) out << "," << Num(v);
    out << "\n";
  }
  return out.str();
}

}  // namespace

std::string Heatmap::AttentionCsv() const { return MatrixCsv(targets, attention); }
std::string Heatmap::FfnCsv() const { return MatrixCsv(targets, ffn); }

Heatmap EmitHeatmap(const std::vector<HeatmapRow>& rows, const SearchSpace& space,
                    const ResourceTable& table, int batch) {
  Require(!rows.empty(), ErrorCode::kInvalidArgument, "heatmap needs at least one solution");
  std::vector<std::size_t> order(rows.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return rows[a].throughput_target < rows[b].throughput_target;
  });
  Heatmap h;
  h.batch = batch;
  for (std::size_t i : order) {
    const RuntimeRatios r = ComputeRuntimeRatios(space, table, rows[i].architecture, batch);
    h.targets.push_back(rows[i].throughput_target);
    h.attention.push_back(r.attention);
    h.ffn.push_back(r.ffn);
  }
  return h;
}

namespace {

std::vector<int> ChoiceFor(const MipProblem& p, const Architecture& arch) {
  Require(static_cast<int>(arch.choices.size()) == p.num_layers, ErrorCode::kShapeMismatch,
          "architecture layer count does not match the problem");
  std::vector<int> choice;
  for (const MipGroup& g : p.groups) {
    const LayerChoice& c = arch.choices[g.layer];
    int found = -1;
    for (std::size_t j = 0; j < g.variants.size() && found < 0; ++j) {
      const MipVariant& v = g.variants[j];
      if ((v.attention < 0 || v.attention == c.attention) && (v.ffn < 0 || v.ffn == c.ffn)) {
        found = static_cast<int>(j);
      }
    }
    Require(found >= 0, ErrorCode::kNotFound,
            "layer " + std::to_string(g.layer) + " choice missing from the problem");
    choice.push_back(found);
  }
  return choice;
}

// Real-valued audit of the limits, independent of the solver's integer form.
bool SatisfiesLimits(const Limits& limits, const Totals& t) {
  const double tol = 1e-12;
  return t.memory_bytes <= limits.memory_max * (1 + tol) &&
         t.throughput >= limits.throughput_min * (1 - tol) &&
         t.runtime_seconds <= limits.latency_max * (1 + tol);
}

}  // namespace

Totals ParentTotals(const MipProblem& problem, const SearchSpace& space) {
  return ComputeTotals(problem, ChoiceFor(problem, Architecture::AllParent(space)));
}

json BaselineRow::ToJson() const {
  return {{"strategy", strategy},
          {"feasible", feasible},
          {"ledger_estimate", ledger_estimate},
          {"kl", kl},
          {"accuracy", accuracy},
          {"throughput_tokens_per_second", throughput},
          {"constraints_satisfied", constraints_satisfied},
          {"fresh_weights", fresh_weights},
          {"architecture", feasible ? architecture.ToJson() : json(nullptr)},
          {"message", message}};
}

json SliceReport::ToJson() const {
  json alts = json::array();
  for (const Architecture& a : alternatives) alts.push_back(a.ToJson());
  json hist = json::array();
  for (const GkdPoint& p : gkd_history) {
    hist.push_back({{"step", p.step},
                    {"validation_kld", p.validation_kld},
                    {"train_loss", p.train_loss}});
  }
  json rows = json::array();
  for (const BaselineRow& r : baselines) rows.push_back(r.ToJson());
  json j = {{"name", name},
            {"limits", limits.ToJson()},
            {"feasible", feasible},
            {"message", message},
            {"artifacts", artifacts}};
  if (!feasible) return j;
  j["batch"] = batch;
  j["architecture"] = architecture.ToJson();
  j["alternatives"] = alts;
  j["totals"] = {{"score", totals.score},
                 {"memory_bytes", totals.memory_bytes},
                 {"runtime_seconds", totals.runtime_seconds},
                 {"throughput_tokens_per_second", totals.throughput}};
  j["constraints_satisfied"] = constraints_satisfied;
  j["runtime_ratios"] = {{"attention", ratios.attention}, {"ffn", ratios.ffn}};
  j["before_gkd"] = before_gkd.ToJson();
  j["after_gkd"] = after_gkd.ToJson();
  j["gkd_history"] = hist;
  j["baselines"] = rows;
  return j;
}

// ---------------------------------------------------------------------------
// Reports.

json RunReport::ToJson() const {
  json stage_rows = json::array();
  for (const StageRecord& s : stages) {
    stage_rows.push_back(
        {{"name", s.name}, {"fingerprint", s.fingerprint}, {"artifacts", s.artifacts}});
  }
  json slice_rows = json::array();
  for (const SliceReport& s : slices) slice_rows.push_back(s.ToJson());
  json j = {{"provenance", {{"config_hash", config_hash}, {"seeds", seeds.ToJson()}}},
            {"stages", stage_rows},
            {"parent_metrics", parent_metrics.ToJson()},
            {"slices", slice_rows},
            {"artifacts", artifacts},
            {"heatmap", nullptr}};
  if (heatmap) {
    j["heatmap"] = {{"batch", heatmap->batch},
                    {"throughput_targets", heatmap->targets},
                    {"attention", heatmap->attention},
                    {"ffn", heatmap->ffn}};
  }
  return j;
}

std::string RunReport::ToText() const {
  std::ostringstream out;
  auto metrics = [&](const char* label, const ModelMetrics& m) {
    out << "  " << label << ": lm_loss " << Short(m.lm_loss) << ", kl " << Short(m.kl)
        << ", accuracy " << Short(m.accuracy) << ", composite " << Short(m.composite) << "\n";
  };
  out << "config " << config_hash << "\n";
  out << "stages:";
  for (const StageRecord& s : stages) out << " " << s.name;
  out << "\n";
  out << "parent\n";
  metrics("metrics", parent_metrics);
  for (const SliceReport& s : slices) {
    out << "slice " << s.name << "\n";
    if (!s.feasible) {
      out << "  infeasible: " << s.message << "\n";
      continue;
    }
    out << "  batch " << s.batch << ", throughput " << Short(s.totals.throughput)
        << " tok/s, memory " << Short(s.totals.memory_bytes) << " B, ledger score "
        << Short(s.totals.score) << ", limits "
        << (s.constraints_satisfied ? "satisfied" : "VIOLATED") << "\n";
    out << "  layers:";
    for (std::size_t l = 0; l < s.architecture.choices.size(); ++l) {
      out << " " << s.architecture.choices[l].attention << "/"
          << s.architecture.choices[l].ffn;
    }
    out << "\n";
    metrics("before gkd", s.before_gkd);
    metrics("after gkd", s.after_gkd);
    if (!s.baselines.empty()) {
      out << "  baselines (strategy, ledger, kl, accuracy, throughput):\n";
      for (const BaselineRow& r : s.baselines) {
        out << "    " << r.strategy;
        if (!r.feasible) {
          out << " infeasible: " << r.message << "\n";
          continue;
        }
        out << " " << Short(r.ledger_estimate) << " " << Short(r.kl) << " "
            << Short(r.accuracy) << " " << Short(r.throughput) << "\n";
      }
    }
  }
  if (heatmap) {
    out << "heatmap at batch " << heatmap->batch << " (row sums attention/ffn):\n";
    for (std::size_t i = 0; i < heatmap->targets.size(); ++i) {
      double a = 0.0, f = 0.0;
      for (double v : heatmap->attention[i]) a += v;
      for (double v : heatmap->ffn[i]) f += v;
      out << "  " << Short(heatmap->targets[i]) << ": " << Short(a) << " / " << Short(f)
          << "\n";
    }
  }
  return out.str();
}

const std::vector<std::string>& PipelineStages() {
  static const std::vector<std::string> kStages = {
      "parent", "library", "resources", "scoring", "search", "assemble", "gkd", "evaluate"};
  return kStages;
}

// ---------------------------------------------------------------------------
// Orchestration.

namespace {

constexpr const char* kManifest = "manifest.json";

struct Context {
  const PipelineConfig* config = nullptr;
  std::string hash;
  json provenance;
  SearchSpace space;
  PipelineData data;
  ToyTransformer parent;
  BlockLibrary library;
  ResourceTable table;
  ScoreLedger ledger;

  explicit Context(const PipelineConfig& c)
      : config(&c),
        hash(c.Hash()),
        provenance({{"config_hash", hash}, {"seeds", c.seeds.ToJson()}}),
        space(c.ResolvedSpace()),
        data(PipelineData::Make(c)) {}
};

MipProblem MakeProblem(const Context& ctx, int batch, const Limits& limits) {
  MipProblem p = BuildProblem(ctx.space, ctx.ledger, ctx.table, batch, limits,
                              ctx.config->encoding);
  p.alpha = ctx.config->alpha;
  return p;
}

Limits EffectiveLimits(const Context& ctx, const SliceSpec& s) {
  Limits l = s.limits;
  if (!s.relative) return l;
  const RelativeLimits& r = *s.relative;
  const Totals pt = ParentTotals(MakeProblem(ctx, r.reference_batch, Limits{}), ctx.space);
  if (r.throughput_factor) {
    l.throughput_min = std::max(l.throughput_min, *r.throughput_factor * pt.throughput);
  }
  if (r.memory_factor) l.memory_max = std::min(l.memory_max, *r.memory_factor * pt.memory_bytes);
  if (r.latency_factor) {
    l.latency_max = std::min(l.latency_max, *r.latency_factor * pt.runtime_seconds);
  }
  return l;
}


std::uint64_t NameSalt(const std::string& name) {
  Fnv1a h;
  h.Update(name);
  return h.digest();
}

std::vector<BaselineRow> BaselineTable(const Context& ctx, const MipProblem& problem,
                                       const Architecture& mip, std::uint64_t seed) {
  const Corpus& eval = ctx.data.eval;
  const std::vector<ProbeTask>& tasks = ctx.data.split.half_b.tasks;
  auto finish = [&](BaselineRow& r, const std::vector<int>& choice,
                    const ToyTransformer& model) {
    const Totals t = ComputeTotals(problem, choice);
    r.ledger_estimate = t.score;
    r.throughput = t.throughput;
    r.constraints_satisfied = SatisfiesLimits(problem.limits, t);
    r.kl = CorpusKld(ctx.parent, model, eval);
    r.accuracy = ProbeAccuracy(model, tasks);
  };
  std::vector<BaselineRow> rows;
  {
    BaselineRow r;
    r.strategy = "mip";
    r.feasible = true;
    r.architecture = mip;
    finish(r, ChoiceFor(problem, mip), ctx.library.Assemble(ctx.parent, mip));
    rows.push_back(r);
  }
  auto add = [&](const char* name, const BaselineResult& b) {
    BaselineRow r;
    r.strategy = name;
    r.feasible = b.feasible;
    r.message = b.message;
    r.fresh_weights = b.fresh_weights;
    if (b.feasible) {
      r.architecture = b.architecture;
      ToyTransformer model = ctx.library.Assemble(ctx.parent, b.architecture);
      if (b.fresh_weights) {
        Rng rng(MixSeed(seed, 3));
        for (Block& block : model.layers()) block = RandomizeBlockWeights(block, rng);
      }
      finish(r, b.choice, model);
    }
    rows.push_back(r);
  };
  const int attempts = ctx.config->random_attempts;
  add("greedy", GreedySearch(problem));
  add("max_params", MaxParamsSearch(problem));
  add("random_library", RandomSearch(problem, RandomMode::kFromLibrary, MixSeed(seed, 1),
                                     attempts));
  add("fully_random", RandomSearch(problem, RandomMode::kFullyRandom, MixSeed(seed, 2),
                                   attempts));
  return rows;
}

std::string CommentLine(const json& provenance) {
  return "# provenance " + provenance.dump() + "\n";
}

struct SliceState {
  SliceReport report;
  std::optional<ToyTransformer> child;
  std::optional<ToyTransformer> tuned;
};

class Runner {
 public:
  explicit Runner(const PipelineConfig& config)
      : config_(config), ctx_(config), out_(config.output_dir) {
    for (const char* d : {"", "solutions", "children", "gkd"}) fs::create_directories(out_ / d);
    const fs::path manifest = out_ / kManifest;
    if (fs::exists(manifest)) {
      try {
        manifest_ = ReadJsonFile(manifest.string());
      } catch (const Error&) {
        manifest_ = json::object();
      }
    }
    if (!manifest_.is_object() || !manifest_.contains("stages") ||
        !manifest_.at("stages").is_object()) {
      manifest_ = {{"stages", json::object()}};
    }
    report_.config_hash = ctx_.hash;
    report_.seeds = config.seeds;
    for (const SliceSpec& s : config.slices) {
      SliceState st;
      st.report.name = s.name;
      slices_.push_back(std::move(st));
    }
  }

  RunReport Run() {
    const auto start = std::chrono::steady_clock::now();
    const json cfg = HashableConfig(config_);
    const json seeds = config_.seeds.ToJson();

    const std::string fp_parent =
        JsonFingerprint({{"stage", "parent"}, {"model", cfg["model"]}, {"corpus", cfg["corpus"]},
                         {"parent", cfg["parent"]}, {"seed_corpus", seeds["corpus"]},
                         {"seed_parent", seeds["parent"]}});
    Stage("parent", fp_parent, {"parent.pzt"}, [&] { TrainOrLoadParent(); },
          [&] { ctx_.parent = LoadParent((out_ / "parent.pzt").string()); });

    const std::string fp_library =
        JsonFingerprint({{"stage", "library"}, {"parent", fp_parent}, {"space", cfg["space"]},
                         {"bld", cfg["bld"]}, {"seed_bld", seeds["bld"]}});
    Stage("library", fp_library, {"library/library.json"}, [&] { BuildLibrary(); },
          [&] { ctx_.library = BlockLibrary::Load((out_ / "library").string()); });

    const std::string fp_resources = JsonFingerprint(
        {{"stage", "resources"}, {"space", cfg["space"]}, {"resources", cfg["resources"]},
         {"batches", TableBatches(config_)}});
    Stage("resources", fp_resources, {"resources.csv"}, [&] { BuildResources(); },
          [&] {
            ctx_.table = LoadMeasurements((out_ / "resources.csv").string(), ctx_.space);
          });

    const std::string fp_scoring =
        JsonFingerprint({{"stage", "scoring"}, {"library", fp_library},
                         {"scoring", cfg["scoring"]}, {"tasks", cfg["tasks"]},
                         {"seed_scoring", seeds["scoring"]}});
    Stage("scoring", fp_scoring, {"ledger.json"}, [&] { Score(); },
          [&] {
            ctx_.ledger = ScoreLedger::FromJson(ReadJsonFile((out_ / "ledger.json").string()),
                                                ctx_.space);
          });

    std::vector<std::string> solution_files;
    for (const SliceSpec& s : config_.slices) solution_files.push_back(SolutionPath(s.name));
    const std::string fp_search =
        JsonFingerprint({{"stage", "search"}, {"scoring", fp_scoring},
                         {"resources", fp_resources}, {"slices", cfg["slices"]},
                         {"search", cfg["search"]}});
    Stage("search", fp_search, solution_files, [&] { Search(); }, [&] { LoadSearch(); });

    const std::string fp_assemble =
        JsonFingerprint({{"stage", "assemble"}, {"search", fp_search}});
    Stage("assemble", fp_assemble, ChildFiles(".pzt"), [&] { Assemble(); },
          [&] { LoadChildren(); });

    const std::string fp_gkd = JsonFingerprint(
        {{"stage", "gkd"}, {"assemble", fp_assemble}, {"gkd", cfg["gkd"]},
         {"seed_gkd", seeds["gkd"]}});
    std::vector<std::string> gkd_files;
    if (config_.gkd_enabled) {
      for (const std::string& f : ChildFiles(".gkd.pzt")) gkd_files.push_back(f);
      for (const std::string& f : ChildFiles(".gkd.json", "gkd/")) gkd_files.push_back(f);
    }
    Stage("gkd", fp_gkd, gkd_files, [&] { Gkd(); }, [&] { LoadGkd(); });

    const std::string fp_eval = JsonFingerprint(
        {{"stage", "evaluate"}, {"gkd", fp_gkd}, {"heatmap", cfg["heatmap"]},
         {"baselines", cfg["baselines"]}, {"seed_baselines", seeds["baselines"]}});
    // Always recomputed: it only reads the persisted stages.
    StageRecord rec;
    rec.name = "evaluate";
    rec.fingerprint = fp_eval;
    const auto t0 = std::chrono::steady_clock::now();
    Guard("evaluate", "report.json", [&] { Evaluate(); });
    rec.artifacts = {"report.json", "report.txt"};
    rec.seconds = Seconds(t0);
    report_.stages.push_back(rec);
    Guard("evaluate", "report.json", [&] { WriteReport(Seconds(start)); });
    return report_;
  }

 private:
  static double Seconds(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }

  std::string Path(const std::string& rel) const { return (out_ / rel).string(); }
  static std::string SolutionPath(const std::string& slice) {
    return "solutions/" + slice + ".json";
  }

  // Artifacts of feasible slices, known once the search stage has run.
  std::vector<std::string> ChildFiles(const std::string& suffix,
                                      const std::string& dir = "children/") const {
    std::vector<std::string> files;
    for (const SliceState& s : slices_) {
      if (s.report.feasible) files.push_back(dir + s.report.name + suffix);
    }
    return files;
  }

  void Guard(const std::string& name, const std::string& artifact,
             const std::function<void()>& fn) {
    const std::string where = Path(artifact);
    try {
      fn();
    } catch (const Error& e) {
      Fail(e.code(), "stage '" + name + "' failed (artifact " + where + "): " + e.what());
    } catch (const std::exception& e) {
      Fail(ErrorCode::kInternal,
           "stage '" + name + "' failed (artifact " + where + "): " + e.what());
    }
  }

  void Stage(const std::string& name, const std::string& fp,
             const std::vector<std::string>& artifacts, const std::function<void()>& run,
             const std::function<void()>& load) {
    StageRecord rec;
    rec.name = name;
    rec.fingerprint = fp;
    rec.artifacts = artifacts;
    const auto t0 = std::chrono::steady_clock::now();
    json& stages = manifest_["stages"];
    bool resumable = stages.contains(name) && stages[name] == fp;
    for (const std::string& a : artifacts) resumable = resumable && fs::exists(out_ / a);
    Guard(name, artifacts.empty() ? std::string(kManifest) : artifacts.front(), [&] {
      if (resumable) {
        try {
          load();
          rec.resumed = true;
        } catch (const Error&) {
          rec.resumed = false;
        }
      }
      if (!rec.resumed) {
        stages.erase(name);
        run();
        stages[name] = fp;
        manifest_["provenance"] = ctx_.provenance;
        WriteJsonFile(Path(kManifest), manifest_);
      }
    });
    rec.seconds = Seconds(t0);
    report_.stages.push_back(rec);
  }

  ToyTransformer LoadParent(const std::string& path) const {
    ToyTransformer m = ToyTransformer::Load(path);
    Require(m.config() == config_.model, ErrorCode::kSchema,
            path + ": parent model config does not match the pipeline config");
    return m;
  }

  void TrainOrLoadParent() {
    json meta = {{"provenance", ctx_.provenance}};
    if (!config_.parent_path.empty()) {
      ctx_.parent = LoadParent(config_.parent_path);
      meta["source"] = "loaded";
    } else {
      std::vector<double> losses;
      ctx_.parent = RunParentStage(config_, ctx_.data, &losses);
      meta["source"] = "trained";
      meta["steps"] = config_.parent.steps;
      meta["first_loss"] = losses.empty() ? json(nullptr) : json(losses.front());
      meta["last_loss"] = losses.empty() ? json(nullptr) : json(losses.back());
    }
    ctx_.parent.Save(Path("parent.pzt"), meta);
  }

  void BuildLibrary() {
    ctx_.library = RunLibraryStage(config_, ctx_.parent, ctx_.space, ctx_.data);
    ctx_.library.metadata()["provenance"] = ctx_.provenance;
    ctx_.library.Save(Path("library"));
  }

  void BuildResources() {
    ctx_.table = RunResourceStage(config_, ctx_.space);
    WriteTextFile(Path("resources.csv"), CommentLine(ctx_.provenance) + ctx_.table.ToCsv());
  }

  void Score() {
    ctx_.ledger = RunScoringStage(config_, ctx_.parent, ctx_.library, ctx_.data);
    WriteJsonFile(Path("ledger.json"),
                  {{"provenance", ctx_.provenance}, {"entries", ctx_.ledger.ToJson()}});
  }

  void Search() {
    for (std::size_t i = 0; i < config_.slices.size(); ++i) {
      const SliceSpec& spec = config_.slices[i];
      SliceReport& r = slices_[i].report;
      r.limits = EffectiveLimits(ctx_, spec);
      const std::vector<int> batches =
          spec.batches.empty() ? ctx_.table.batches() : spec.batches;
      auto make = [&](int b) { return MakeProblem(ctx_, b, r.limits); };
      const SweepResult sweep = BatchSweep(make, batches, spec.max_batch, {}, config_.workers);
      json rows = json::array();
      for (const SweepRow& row : sweep.rows) {
        rows.push_back({{"batch", row.batch}, {"solution", row.solution.ToJson()}});
      }
      json doc = {{"provenance", ctx_.provenance},
                  {"slice", spec.ToJson()},
                  {"limits", r.limits.ToJson()},
                  {"sweep", rows},
                  {"message", sweep.message},
                  {"batch", nullptr},
                  {"architecture", nullptr},
                  {"alternatives", json::array()}};
      r.feasible = sweep.best >= 0;
      r.message = sweep.message;
      if (r.feasible) {
        const SweepRow& best = sweep.rows[sweep.best];
        r.batch = best.batch;
        r.architecture = best.solution.architecture;
        doc["batch"] = r.batch;
        doc["architecture"] = r.architecture.ToJson();
        if (config_.num_solutions > 1) {
          const auto sols = SolveDiverse(make(r.batch), config_.num_solutions);
          for (std::size_t k = 1; k < sols.size(); ++k) {
            r.alternatives.push_back(sols[k].architecture);
            doc["alternatives"].push_back(sols[k].architecture.ToJson());
          }
        }
      }
      WriteJsonFile(Path(SolutionPath(spec.name)), doc);
    }
  }

  void LoadSearch() {
    for (std::size_t i = 0; i < config_.slices.size(); ++i) {
      SliceReport& r = slices_[i].report;
      const json doc = ReadJsonFile(Path(SolutionPath(r.name)));
      r.limits = Limits::FromJson(doc.at("limits"));
      r.message = doc.at("message").get<std::string>();
      r.feasible = !doc.at("batch").is_null();
      r.alternatives.clear();
      if (r.feasible) {
        r.batch = doc.at("batch").get<int>();
        r.architecture = Architecture::FromJson(doc.at("architecture"));
        for (const json& a : doc.at("alternatives")) {
          r.alternatives.push_back(Architecture::FromJson(a));
        }
      }
    }
  }

  void Assemble() {
    for (SliceState& s : slices_) {
      if (!s.report.feasible) continue;
      s.child = ctx_.library.Assemble(ctx_.parent, s.report.architecture);
      s.child->Save(Path("children/" + s.report.name + ".pzt"),
                    {{"provenance", ctx_.provenance},
                     {"slice", s.report.name},
                     {"batch", s.report.batch},
                     {"architecture", s.report.architecture.ToJson()}});
    }
  }

  void LoadChildren() {
    for (SliceState& s : slices_) {
      if (!s.report.feasible) continue;
      s.child = ToyTransformer::Load(Path("children/" + s.report.name + ".pzt"));
    }
  }

  void Gkd() {
    for (SliceState& s : slices_) {
      if (!s.report.feasible) continue;
      s.report.gkd_history.clear();
      if (!config_.gkd_enabled) {
        s.tuned = *s.child;
        continue;
      }
      GkdResult g = RunGkdStage(config_, ctx_.parent, *s.child, ctx_.data,
                                MixSeed(config_.seeds.gkd, NameSalt(s.report.name)));
      s.tuned = std::move(g.model);
      s.report.gkd_history = g.history;
      s.tuned->Save(Path("children/" + s.report.name + ".gkd.pzt"),
                    {{"provenance", ctx_.provenance},
                     {"slice", s.report.name},
                     {"best_step", g.best_step},
                     {"diverged", g.diverged}});
      json hist = json::array();
      for (const GkdPoint& p : g.history) {
        hist.push_back({{"step", p.step},
                        {"validation_kld", p.validation_kld},
                        {"train_loss", p.train_loss}});
      }
      WriteJsonFile(Path("gkd/" + s.report.name + ".gkd.json"),
                    {{"provenance", ctx_.provenance},
                     {"slice", s.report.name},
                     {"loss", config_.gkd_loss.name()},
                     {"best_step", g.best_step},
                     {"diverged", g.diverged},
                     {"history", hist}});
    }
  }

  void LoadGkd() {
    for (SliceState& s : slices_) {
      if (!s.report.feasible) continue;
      s.report.gkd_history.clear();
      if (!config_.gkd_enabled) {
        s.tuned = *s.child;
        continue;
      }
      s.tuned = ToyTransformer::Load(Path("children/" + s.report.name + ".gkd.pzt"));
      const json doc = ReadJsonFile(Path("gkd/" + s.report.name + ".gkd.json"));
      for (const json& p : doc.at("history")) {
        s.report.gkd_history.push_back({p.at("step").get<int>(),
                                        p.at("validation_kld").get<double>(),
                                        p.at("train_loss").get<double>()});
      }
    }
  }

  void Evaluate() {
    const Corpus& eval = ctx_.data.eval;
    const std::vector<ProbeTask>& tasks = ctx_.data.split.half_b.tasks;
    report_.parent_metrics = EvaluateMetrics(ctx_.parent, ctx_.parent, eval, tasks);
    for (std::size_t i = 0; i < slices_.size(); ++i) {
      SliceState& s = slices_[i];
      SliceReport& r = s.report;
      r.artifacts = {SolutionPath(r.name)};
      if (!r.feasible) continue;
      r.artifacts.push_back("children/" + r.name + ".pzt");
      if (config_.gkd_enabled) {
        r.artifacts.push_back("children/" + r.name + ".gkd.pzt");
        r.artifacts.push_back("gkd/" + r.name + ".gkd.json");
      }
      MipProblem problem = MakeProblem(ctx_, r.batch, r.limits);
      r.totals = ComputeTotals(problem, ChoiceFor(problem, r.architecture));
      r.constraints_satisfied = SatisfiesLimits(r.limits, r.totals);
      r.ratios = ComputeRuntimeRatios(ctx_.space, ctx_.table, r.architecture, r.batch);
      r.before_gkd = EvaluateMetrics(ctx_.parent, *s.child, eval, tasks);
      r.after_gkd = EvaluateMetrics(ctx_.parent, *s.tuned, eval, tasks);
      if (config_.baselines_enabled) {
        r.baselines = BaselineTable(ctx_, problem, r.architecture,
                                    MixSeed(config_.seeds.baselines, NameSalt(r.name)));
      }
    }
    if (!config_.heatmap_throughput_factors.empty()) {
      const int b = config_.heatmap_batch;
      const Totals pt = ParentTotals(MakeProblem(ctx_, b, Limits{}), ctx_.space);
      std::vector<HeatmapRow> rows;
      for (double f : config_.heatmap_throughput_factors) {
        Limits l;
        l.throughput_min = f * pt.throughput;
        MipProblem p = MakeProblem(ctx_, b, l);
        p.alpha = 1.0;
        const MipSolution sol = SolveMip(p);
        if (sol.feasible) rows.push_back({l.throughput_min, sol.architecture});
      }
      if (!rows.empty()) report_.heatmap = EmitHeatmap(rows, ctx_.space, ctx_.table, b);
    }
  }

  void WriteReport(double total_seconds) {
    report_.slices.clear();
    for (const SliceState& s : slices_) report_.slices.push_back(s.report);
    std::vector<std::string>& arts = report_.artifacts;
    arts = {kManifest, "config.json", "space.json", "parent.pzt", "library/library.json",
            "resources.csv", "ledger.json"};
    for (const SliceState& s : slices_) {
      for (const std::string& a : s.report.artifacts) arts.push_back(a);
    }
    WriteJsonFile(Path("config.json"),
                  {{"provenance", ctx_.provenance}, {"config", HashableConfig(config_)}});
    json space = ctx_.space.ToJson();
    space["provenance"] = ctx_.provenance;
    WriteJsonFile(Path("space.json"), space);
    if (report_.heatmap) {
      WriteTextFile(Path("heatmap_attention.csv"),
                    CommentLine(ctx_.provenance) + report_.heatmap->AttentionCsv());
      WriteTextFile(Path("heatmap_ffn.csv"),
                    CommentLine(ctx_.provenance) + report_.heatmap->FfnCsv());
      arts.push_back("heatmap_attention.csv");
      arts.push_back("heatmap_ffn.csv");
    }
    arts.push_back("report.txt");
    arts.push_back("report.json");
    WriteJsonFile(Path("report.json"), report_.ToJson());
    WriteTextFile(Path("report.txt"), report_.ToText());
    // Wall-clock data lives apart from the reproducible artifacts.
    json stages = json::array();
    for (const StageRecord& s : report_.stages) {
      stages.push_back({{"name", s.name}, {"seconds", s.seconds}, {"resumed", s.resumed}});
    }
    WriteJsonFile(Path("timings.json"),
                  {{"stages", stages}, {"total_seconds", total_seconds}});
  }

  const PipelineConfig& config_;
  Context ctx_;
  fs::path out_;
  json manifest_ = json::object();
  RunReport report_;
  std::vector<SliceState> slices_;
};

}  // namespace

RunReport RunPipeline(const PipelineConfig& config) {
  config.Validate();
  Runner runner(config);
  return runner.Run();
}

std::vector<std::vector<BaselineRow>> CompareBaselines(const PipelineConfig& config,
                                                       std::optional<std::uint64_t> seed) {
  config.Validate();
  Context ctx(config);
  const fs::path out(config.output_dir);
  auto path = [&](const std::string& rel) { return (out / rel).string(); };
  ctx.parent = ToyTransformer::Load(path("parent.pzt"));
  ctx.library = BlockLibrary::Load(path("library"));
  ctx.table = LoadMeasurements(path("resources.csv"), ctx.space);
  ctx.ledger = ScoreLedger::FromJson(ReadJsonFile(path("ledger.json")), ctx.space);
  std::vector<std::vector<BaselineRow>> out_rows;
  for (const SliceSpec& s : config.slices) {
    const json doc = ReadJsonFile(path("solutions/" + s.name + ".json"));
    if (doc.at("batch").is_null()) {
      BaselineRow r;
      r.strategy = "mip";
      r.message = doc.at("message").get<std::string>();
      out_rows.push_back({r});
      continue;
    }
    const Limits limits = Limits::FromJson(doc.at("limits"));
    const MipProblem problem = MakeProblem(ctx, doc.at("batch").get<int>(), limits);
    const std::uint64_t base = seed ? *seed : config.seeds.baselines;
    out_rows.push_back(BaselineTable(ctx, problem, Architecture::FromJson(doc.at("architecture")),
                                     MixSeed(base, NameSalt(s.name))));
  }
  return out_rows;
}

json SolveProblemFile(const ProblemFile& file, const std::string& base_dir, bool sweep,
                      int workers) {
  const SearchSpace space = SearchSpace::Load(Resolve(base_dir, file.space));
  const ScoreLedger ledger =
      ScoreLedger::FromJson(ReadJsonFile(Resolve(base_dir, file.ledger)), space);
  const ResourceTable table = LoadMeasurements(Resolve(base_dir, file.resources), space);
  auto make = [&](int b) {
    MipProblem p = BuildProblem(space, ledger, table, b, file.limits, file.encoding);
    p.alpha = file.alpha;
    return p;
  };
  const std::vector<int> batches =
      sweep ? file.batches : std::vector<int>{file.batches.front()};
  const SweepResult result = BatchSweep(make, batches, sweep ? file.max_batch : 0, {}, workers);
  json rows = json::array();
  for (const SweepRow& row : result.rows) {
    rows.push_back({{"batch", row.batch}, {"solution", row.solution.ToJson()}});
  }
  json out = {{"problem", file.ToJson()},
              {"sweep", rows},
              {"message", result.message},
              {"batch", nullptr},
              {"solutions", json::array()}};
  if (result.best < 0) return out;
  const int b = result.rows[result.best].batch;
  out["batch"] = b;
  for (const MipSolution& s : SolveDiverse(make(b), file.num_solutions)) {
    out["solutions"].push_back(s.ToJson());
  }
  return out;
}

}  // namespace puzzle
