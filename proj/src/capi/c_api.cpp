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

#include "puzzle/puzzle.h"

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <memory>
#include <new>
#include <string>
#include <utility>

#include "json.hpp"
#include "puzzle/common.hpp"
#include "puzzle/pipeline.hpp"
#include "puzzle/resource_model.hpp"
#include "puzzle/scoring.hpp"
#include "puzzle/search_space.hpp"
#include "puzzle/solver.hpp"
#include "puzzle/toy_model.hpp"
#include "puzzle/training.hpp"

struct puzzle_config {
  puzzle::PipelineConfig value;
};
struct puzzle_space {
  puzzle::SearchSpace value;
};
struct puzzle_model {
  puzzle::ToyTransformer value;
};
struct puzzle_library {
  puzzle::BlockLibrary value;
};
struct puzzle_table {
  puzzle::ResourceTable value;
};
struct puzzle_ledger {
  puzzle::ScoreLedger value;
};

namespace {

using nlohmann::json;
using puzzle::ErrorCode;

thread_local std::string g_last_error;

template <typename F>
puzzle_status Guard(F&& fn) {
  try {
    fn();
    g_last_error.clear();
    return PUZZLE_OK;
  } catch (const puzzle::Error& e) {
    g_last_error = e.what();
    return static_cast<puzzle_status>(e.code());
  } catch (const json::exception& e) {
    g_last_error = std::string("json: ") + e.what();
    return PUZZLE_SCHEMA;
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return PUZZLE_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return PUZZLE_INTERNAL;
  } catch (...) {
    g_last_error = "unknown error";
    return PUZZLE_INTERNAL;
  }
}

void NotNull(const void* p, const char* name) {
  puzzle::Require(p != nullptr, ErrorCode::kInvalidArgument, std::string(name) + " is null");
}

char* Dup(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out == nullptr) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void EnsureParentDir(const std::string& path) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
}

template <typename H, typename T>
void Emit(H** out, T&& value) {
  *out = new H{std::forward<T>(value)};
}

puzzle::Architecture ParseArchitecture(const std::string& text) {
  json doc = json::parse(text);
  if (doc.is_object()) {
    if (doc.contains("architecture")) {
      doc = doc.at("architecture");
    } else if (doc.contains("solutions")) {
      const json& sols = doc.at("solutions");
      puzzle::Require(sols.is_array() && !sols.empty(), ErrorCode::kInfeasible,
                      "result holds no solutions");
      doc = sols.at(0).at("architecture");
    } else {
      puzzle::Fail(ErrorCode::kSchema, "object carries no architecture");
    }
  }
  puzzle::Require(!doc.is_null(), ErrorCode::kInfeasible, "architecture is null");
  return puzzle::Architecture::FromJson(doc);
}

json HistoryJson(const puzzle::GkdResult& g) {
  json hist = json::array();
  for (const puzzle::GkdPoint& p : g.history) {
    hist.push_back({{"step", p.step},
                    {"validation_kld", p.validation_kld},
                    {"train_loss", p.train_loss}});
  }
  return {{"history", hist}, {"best_step", g.best_step}, {"diverged", g.diverged}};
}

}  // namespace

extern "C" {

const char* puzzle_version(void) { return "0.1.0"; }

const char* puzzle_status_name(puzzle_status status) {
  switch (status) {
    case PUZZLE_OK: return "ok";
    case PUZZLE_INVALID_ARGUMENT: return "invalid_argument";
    case PUZZLE_OUT_OF_RANGE: return "out_of_range";
    case PUZZLE_SHAPE_MISMATCH: return "shape_mismatch";
    case PUZZLE_INFEASIBLE: return "infeasible";
    case PUZZLE_IO: return "io";
    case PUZZLE_SCHEMA: return "schema";
    case PUZZLE_NOT_FOUND: return "not_found";
    case PUZZLE_DEGENERATE: return "degenerate";
    case PUZZLE_INTERNAL: return "internal";
  }
  return "unknown";
}

const char* puzzle_last_error(void) { return g_last_error.c_str(); }

void puzzle_string_free(char* s) { std::free(s); }

// --- config ----------------------------------------------------------------

puzzle_status puzzle_config_load(const char* path, puzzle_config** out) {
  return Guard([&] {
    NotNull(path, "path");
    NotNull(out, "out");
    Emit(out, puzzle::PipelineConfig::Load(path));
  });
}

puzzle_status puzzle_config_from_json(const char* text, const char* base_dir,
                                      puzzle_config** out) {
  return Guard([&] {
    NotNull(text, "json");
    NotNull(out, "out");
    Emit(out, puzzle::PipelineConfig::FromJson(json::parse(text),
                                               base_dir != nullptr ? base_dir : "."));
  });
}

puzzle_status puzzle_config_to_json(const puzzle_config* config, char** out) {
  return Guard([&] {
    NotNull(config, "config");
    NotNull(out, "out");
    *out = Dup(config->value.ToJson().dump(2));
  });
}

puzzle_status puzzle_config_hash(const puzzle_config* config, char** out) {
  return Guard([&] {
    NotNull(config, "config");
    NotNull(out, "out");
    *out = Dup(config->value.Hash());
  });
}

puzzle_status puzzle_config_set_output_dir(puzzle_config* config, const char* dir) {
  return Guard([&] {
    NotNull(config, "config");
    NotNull(dir, "dir");
    puzzle::Require(*dir != '\0', ErrorCode::kInvalidArgument, "output_dir is empty");
    config->value.output_dir = dir;
  });
}

puzzle_status puzzle_config_set_workers(puzzle_config* config, int workers) {
  return Guard([&] {
    NotNull(config, "config");
    puzzle::Require(workers >= 1, ErrorCode::kInvalidArgument, "workers must be >= 1");
    config->value.workers = workers;
  });
}

void puzzle_config_free(puzzle_config* config) { delete config; }

// --- space -----------------------------------------------------------------

puzzle_status puzzle_space_from_config(const puzzle_config* config, puzzle_space** out) {
  return Guard([&] {
    NotNull(config, "config");
    NotNull(out, "out");
    Emit(out, config->value.ResolvedSpace());
  });
}

puzzle_status puzzle_space_default(int num_layers, int query_heads, int head_dim,
                                   int kv_heads, int intermediate_dim, puzzle_space** out) {
  return Guard([&] {
    NotNull(out, "out");
    puzzle::Require(num_layers >= 1, ErrorCode::kInvalidArgument, "num_layers must be >= 1");
    puzzle::ParentShape shape;
    shape.query_heads = query_heads;
    shape.head_dim = head_dim;
    shape.kv_heads = kv_heads;
    shape.intermediate_dim = intermediate_dim;
    Emit(out, puzzle::SearchSpace::Default(num_layers, shape));
  });
}

puzzle_status puzzle_space_load(const char* path, puzzle_space** out) {
  return Guard([&] {
    NotNull(path, "path");
    NotNull(out, "out");
    Emit(out, puzzle::SearchSpace::Load(path));
  });
}

puzzle_status puzzle_space_save(const puzzle_space* space, const char* path) {
  return Guard([&] {
    NotNull(space, "space");
    NotNull(path, "path");
    EnsureParentDir(path);
    space->value.Save(path);
  });
}

puzzle_status puzzle_space_to_json(const puzzle_space* space, char** out) {
  return Guard([&] {
    NotNull(space, "space");
    NotNull(out, "out");
    *out = Dup(space->value.ToJson().dump(2));
  });
}

puzzle_status puzzle_space_num_layers(const puzzle_space* space, int* out) {
  return Guard([&] {
    NotNull(space, "space");
    NotNull(out, "out");
    *out = space->value.num_layers();
  });
}

puzzle_status puzzle_space_layer_options(const puzzle_space* space, int layer, int* attention,
                                         int* ffn) {
  return Guard([&] {
    NotNull(space, "space");
    NotNull(attention, "attention");
    NotNull(ffn, "ffn");
    const puzzle::LayerMenu& menu = space->value.layer(layer);
    *attention = static_cast<int>(menu.attention.size());
    *ffn = static_cast<int>(menu.ffn.size());
  });
}

puzzle_status puzzle_space_cardinality_log10(const puzzle_space* space, double* out) {
  return Guard([&] {
    NotNull(space, "space");
    NotNull(out, "out");
    *out = puzzle::CardinalityLog10(space->value);
  });
}

void puzzle_space_free(puzzle_space* space) { delete space; }

// --- models ----------------------------------------------------------------

puzzle_status puzzle_model_train_parent(const puzzle_config* config, puzzle_model** out) {
  return Guard([&] {
    NotNull(config, "config");
    NotNull(out, "out");
    config->value.Validate();
    puzzle::PipelineData data = puzzle::PipelineData::Make(config->value);
    Emit(out, puzzle::RunParentStage(config->value, data));
  });
}

puzzle_status puzzle_model_load(const char* path, puzzle_model** out) {
  return Guard([&] {
    NotNull(path, "path");
    NotNull(out, "out");
    Emit(out, puzzle::ToyTransformer::Load(path));
  });
}

puzzle_status puzzle_model_save(const puzzle_model* model, const char* path) {
  return Guard([&] {
    NotNull(model, "model");
    NotNull(path, "path");
    EnsureParentDir(path);
    model->value.Save(path);
  });
}

puzzle_status puzzle_model_evaluate(const puzzle_config* config, const puzzle_model* parent,
                                    const puzzle_model* model, char** out) {
  return Guard([&] {
    NotNull(config, "config");
    NotNull(parent, "parent");
    NotNull(model, "model");
    NotNull(out, "out");
    puzzle::PipelineData data = puzzle::PipelineData::Make(config->value);
    puzzle::ModelMetrics m = puzzle::EvaluateMetrics(parent->value, model->value, data.eval,
                                                     data.split.half_b.tasks);
    *out = Dup(m.ToJson().dump(2));
  });
}

puzzle_status puzzle_model_assemble(const puzzle_model* parent, const puzzle_library* library,
                                    const char* architecture_json, puzzle_model** out) {
  return Guard([&] {
    NotNull(parent, "parent");
    NotNull(library, "library");
    NotNull(architecture_json, "architecture_json");
    NotNull(out, "out");
    puzzle::Architecture arch = ParseArchitecture(architecture_json);
    Emit(out, library->value.Assemble(parent->value, arch));
  });
}

puzzle_status puzzle_model_gkd(const puzzle_config* config, const puzzle_model* parent,
                               const puzzle_model* child, puzzle_model** out,
                               char** history_json) {
  return Guard([&] {
    NotNull(config, "config");
    NotNull(parent, "parent");
    NotNull(child, "child");
    NotNull(out, "out");
    puzzle::PipelineData data = puzzle::PipelineData::Make(config->value);
    puzzle::GkdResult g = puzzle::RunGkdStage(config->value, parent->value, child->value, data,
                                              config->value.seeds.gkd);
    std::string hist = HistoryJson(g).dump(2);
    char* h = history_json != nullptr ? Dup(hist) : nullptr;
    Emit(out, std::move(g.model));
    if (history_json != nullptr) *history_json = h;
  });
}

void puzzle_model_free(puzzle_model* model) { delete model; }

// --- libraries -------------------------------------------------------------

puzzle_status puzzle_bld_plan_counts(const puzzle_space* space, const char* mode,
                                     int* subblock_jobs, int* pair_jobs) {
  return Guard([&] {
    NotNull(space, "space");
    NotNull(mode, "mode");
    NotNull(subblock_jobs, "subblock_jobs");
    NotNull(pair_jobs, "pair_jobs");
    puzzle::BldPlan plan =
        puzzle::PlanBld(space->value, puzzle::ParseBldMode(mode), puzzle::BldBudget{}, 0);
    *subblock_jobs = plan.subblock_jobs;
    *pair_jobs = plan.pair_jobs;
  });
}

puzzle_status puzzle_library_build(const puzzle_config* config, const puzzle_model* parent,
                                   const puzzle_space* space, int init_only,
                                   puzzle_library** out) {
  return Guard([&] {
    NotNull(config, "config");
    NotNull(parent, "parent");
    NotNull(space, "space");
    NotNull(out, "out");
    puzzle::PipelineData data = puzzle::PipelineData::Make(config->value);
    Emit(out, puzzle::RunLibraryStage(config->value, parent->value, space->value, data,
                                      init_only != 0));
  });
}

puzzle_status puzzle_library_load(const char* dir, puzzle_library** out) {
  return Guard([&] {
    NotNull(dir, "dir");
    NotNull(out, "out");
    Emit(out, puzzle::BlockLibrary::Load(dir));
  });
}

puzzle_status puzzle_library_save(const puzzle_library* library, const char* dir) {
  return Guard([&] {
    NotNull(library, "library");
    NotNull(dir, "dir");
    library->value.Save(dir);
  });
}

void puzzle_library_free(puzzle_library* library) { delete library; }

// --- resource tables -------------------------------------------------------

puzzle_status puzzle_table_analytic(const puzzle_config* config, const puzzle_space* space,
                                    puzzle_table** out) {
  return Guard([&] {
    NotNull(config, "config");
    NotNull(space, "space");
    NotNull(out, "out");
    puzzle::PipelineConfig c = config->value;
    c.measurements_path.clear();
    Emit(out, puzzle::RunResourceStage(c, space->value));
  });
}

puzzle_status puzzle_table_ingest(const char* path, const puzzle_space* space,
                                  puzzle_table** out, char** report_json) {
  return Guard([&] {
    NotNull(path, "path");
    NotNull(space, "space");
    NotNull(out, "out");
    puzzle::IngestReport report;
    puzzle::ResourceTable table = puzzle::LoadMeasurements(path, space->value, &report);
    char* r = nullptr;
    if (report_json != nullptr) {
      json doc = {{"warnings", report.warnings},
                  {"filled", report.filled},
                  {"clamped", report.clamped}};
      r = Dup(doc.dump(2));
    }
    Emit(out, std::move(table));
    if (report_json != nullptr) *report_json = r;
  });
}

puzzle_status puzzle_table_save(const puzzle_table* table, const char* path) {
  return Guard([&] {
    NotNull(table, "table");
    NotNull(path, "path");
    EnsureParentDir(path);
    puzzle::SaveTable(table->value, path);
  });
}

void puzzle_table_free(puzzle_table* table) { delete table; }

// --- ledgers ---------------------------------------------------------------

puzzle_status puzzle_ledger_score(const puzzle_config* config, const puzzle_model* parent,
                                  const puzzle_library* library, puzzle_ledger** out) {
  return Guard([&] {
    NotNull(config, "config");
    NotNull(parent, "parent");
    NotNull(library, "library");
    NotNull(out, "out");
    puzzle::PipelineData data = puzzle::PipelineData::Make(config->value);
    Emit(out, puzzle::RunScoringStage(config->value, parent->value, library->value, data));
  });
}

puzzle_status puzzle_ledger_load(const char* path, const puzzle_space* space,
                                 puzzle_ledger** out) {
  return Guard([&] {
    NotNull(path, "path");
    NotNull(space, "space");
    NotNull(out, "out");
    Emit(out, puzzle::ScoreLedger::Load(path, space->value));
  });
}

puzzle_status puzzle_ledger_save(const puzzle_ledger* ledger, const char* path) {
  return Guard([&] {
    NotNull(ledger, "ledger");
    NotNull(path, "path");
    EnsureParentDir(path);
    ledger->value.Save(path);
  });
}

void puzzle_ledger_free(puzzle_ledger* ledger) { delete ledger; }

// --- solving ---------------------------------------------------------------

puzzle_status puzzle_solve_problem_file(const char* path, int sweep, int workers,
                                        char** result_json) {
  return Guard([&] {
    NotNull(path, "path");
    NotNull(result_json, "result_json");
    puzzle::Require(workers >= 1, ErrorCode::kInvalidArgument, "workers must be >= 1");
    puzzle::ProblemFile file = puzzle::ProblemFile::FromJson(puzzle::ReadJsonFile(path));
    std::string base = std::filesystem::path(path).parent_path().string();
    json result =
        puzzle::SolveProblemFile(file, base.empty() ? "." : base, sweep != 0, workers);
    *result_json = Dup(result.dump(2));
  });
}

puzzle_status puzzle_solve_problem_json(const char* problem_json, char** solution_json) {
  return Guard([&] {
    NotNull(problem_json, "problem_json");
    NotNull(solution_json, "solution_json");
    puzzle::MipProblem problem = puzzle::MipProblem::FromJson(json::parse(problem_json));
    *solution_json = Dup(puzzle::SolveMip(problem).ToJson().dump(2));
  });
}

// --- pipeline --------------------------------------------------------------

puzzle_status puzzle_pipeline_run(const puzzle_config* config, char** report_json,
                                  char** report_text) {
  return Guard([&] {
    NotNull(config, "config");
    NotNull(report_json, "report_json");
    puzzle::RunReport report = puzzle::RunPipeline(config->value);
    char* j = Dup(report.ToJson().dump(2));
    char* t = nullptr;
    if (report_text != nullptr) {
      try {
        t = Dup(report.ToText());
      } catch (...) {
        std::free(j);
        throw;
      }
    }
    *report_json = j;
    if (report_text != nullptr) *report_text = t;
  });
}

puzzle_status puzzle_compare_baselines(const puzzle_config* config, int use_seed,
                                       uint64_t seed, char** table_json) {
  return Guard([&] {
    NotNull(config, "config");
    NotNull(table_json, "table_json");
    std::optional<std::uint64_t> override_seed;
    if (use_seed != 0) override_seed = seed;
    std::vector<std::vector<puzzle::BaselineRow>> table =
        puzzle::CompareBaselines(config->value, override_seed);
    json doc = json::array();
    for (std::size_t i = 0; i < table.size(); ++i) {
      json rows = json::array();
      for (const puzzle::BaselineRow& r : table[i]) rows.push_back(r.ToJson());
      doc.push_back({{"slice", config->value.slices.at(i).name}, {"rows", rows}});
    }
    *table_json = Dup(doc.dump(2));
  });
}

}  // extern "C"
