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

// Exercises the shared library through its C interface only.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>

#include "common/tiny_config.hpp"
#include "doctest.h"
#include "json.hpp"
#include "puzzle/puzzle.h"

using nlohmann::json;
using puzzle::testing::FreshDir;
using puzzle::testing::TinyPipelineJson;

namespace {

// Takes ownership of a returned string.
json TakeJson(char* s) {
  REQUIRE(s != nullptr);
  json doc = json::parse(s);
  puzzle_string_free(s);
  return doc;
}

std::string TakeString(char* s) {
  REQUIRE(s != nullptr);
  std::string out(s);
  puzzle_string_free(s);
  return out;
}

puzzle_config* TinyConfig(std::uint64_t seed, const std::string& out) {
  puzzle_config* config = nullptr;
  REQUIRE(puzzle_config_from_json(TinyPipelineJson(seed, out).dump().c_str(), nullptr,
                                  &config) == PUZZLE_OK);
  return config;
}

}  // namespace

TEST_CASE("status names and errors") {
  CHECK(std::string(puzzle_status_name(PUZZLE_OK)) == "ok");
  CHECK(std::string(puzzle_status_name(PUZZLE_SCHEMA)) == "schema");
  CHECK(std::string(puzzle_version()) == "0.1.0");

  puzzle_config* config = nullptr;
  CHECK(puzzle_config_load(nullptr, &config) == PUZZLE_INVALID_ARGUMENT);
  CHECK(std::string(puzzle_last_error()).find("path") != std::string::npos);
  CHECK(puzzle_config_from_json("{not json", nullptr, &config) == PUZZLE_SCHEMA);
  CHECK(config == nullptr);
  CHECK(puzzle_config_from_json("{}", nullptr, &config) == PUZZLE_SCHEMA);
  CHECK(std::string(puzzle_last_error()).find("seeds") != std::string::npos);
  CHECK(puzzle_config_load("/nonexistent/puzzle.json", &config) == PUZZLE_IO);

  int layers = 0;
  puzzle_space* space = nullptr;
  REQUIRE(puzzle_space_default(2, 4, 4, 4, 32, &space) == PUZZLE_OK);
  CHECK(std::string(puzzle_last_error()).empty());
  REQUIRE(puzzle_space_num_layers(space, &layers) == PUZZLE_OK);
  int a = 0;
  int f = 0;
  CHECK(puzzle_space_layer_options(space, 2, &a, &f) == PUZZLE_OUT_OF_RANGE);
  puzzle_space_free(space);

  puzzle_config_free(nullptr);
  puzzle_space_free(nullptr);
  puzzle_model_free(nullptr);
  puzzle_library_free(nullptr);
  puzzle_table_free(nullptr);
  puzzle_ledger_free(nullptr);
  puzzle_string_free(nullptr);
}

TEST_CASE("config handle") {
  puzzle_config* config = TinyConfig(1, FreshDir("capi_cfg"));
  char* h = nullptr;
  REQUIRE(puzzle_config_hash(config, &h) == PUZZLE_OK);
  const std::string hash = TakeString(h);
  REQUIRE(puzzle_config_set_output_dir(config, "elsewhere") == PUZZLE_OK);
  REQUIRE(puzzle_config_set_workers(config, 3) == PUZZLE_OK);
  REQUIRE(puzzle_config_hash(config, &h) == PUZZLE_OK);
  CHECK(TakeString(h) == hash);
  CHECK(puzzle_config_set_workers(config, 0) == PUZZLE_INVALID_ARGUMENT);
  CHECK(puzzle_config_set_output_dir(config, "") == PUZZLE_INVALID_ARGUMENT);

  char* text = nullptr;
  REQUIRE(puzzle_config_to_json(config, &text) == PUZZLE_OK);
  puzzle_config* copy = nullptr;
  const std::string dumped = TakeString(text);
  REQUIRE(puzzle_config_from_json(dumped.c_str(), ".", &copy) == PUZZLE_OK);
  REQUIRE(puzzle_config_hash(copy, &h) == PUZZLE_OK);
  CHECK(TakeString(h) == hash);
  puzzle_config_free(copy);
  puzzle_config_free(config);
}

TEST_CASE("default space and plan counts") {
  puzzle_space* space = nullptr;
  REQUIRE(puzzle_space_default(3, 8, 8, 8, 256, &space) == PUZZLE_OK);
  int a = 0;
  int f = 0;
  REQUIRE(puzzle_space_layer_options(space, 1, &a, &f) == PUZZLE_OK);
  CHECK(a == 6);
  CHECK(f == 9);
  double card = 0.0;
  REQUIRE(puzzle_space_cardinality_log10(space, &card) == PUZZLE_OK);
  CHECK(card == doctest::Approx(3 * std::log10(54.0)).epsilon(1e-12));

  // Trainable variants exclude parent and no-op: 4 attention, 7 FFN.
  int sub = 0;
  int pair = 0;
  REQUIRE(puzzle_bld_plan_counts(space, "decoupled", &sub, &pair) == PUZZLE_OK);
  CHECK(sub == (4 + 7) * 3);
  CHECK(pair == 0);
  REQUIRE(puzzle_bld_plan_counts(space, "coupled", &sub, &pair) == PUZZLE_OK);
  CHECK(sub == (4 + 7) * 3);
  CHECK(pair == 4 * 7 * 3);
  CHECK(puzzle_bld_plan_counts(space, "joint", &sub, &pair) == PUZZLE_INVALID_ARGUMENT);

  const std::string path = FreshDir("capi_space") + "/space.json";
  REQUIRE(puzzle_space_save(space, path.c_str()) == PUZZLE_OK);
  puzzle_space* loaded = nullptr;
  REQUIRE(puzzle_space_load(path.c_str(), &loaded) == PUZZLE_OK);
  char* x = nullptr;
  char* y = nullptr;
  REQUIRE(puzzle_space_to_json(space, &x) == PUZZLE_OK);
  REQUIRE(puzzle_space_to_json(loaded, &y) == PUZZLE_OK);
  CHECK(TakeJson(x) == TakeJson(y));
  puzzle_space_free(loaded);
  puzzle_space_free(space);
}

TEST_CASE("solve problem json") {
  // Two groups with two options each; the limit forces one cheap option.
  auto variant = [](int a, double score, double mem) {
    return json{{"attention", a}, {"ffn", 0},        {"id", "v" + std::to_string(a)},
                {"score", score}, {"mem_params", mem}, {"mem_kv", 0.0},
                {"runtime", 1.0}};
  };
  json problem = {{"num_layers", 2},
                  {"batch_size", 1},
                  {"seq_len", 1},
                  {"polarity", "cost"},
                  {"limits", {{"memory_max_bytes", 3.0}}},
                  {"groups",
                   {{{"layer", 0}, {"variants", {variant(0, 0.0, 2.0), variant(1, 1.0, 1.0)}}},
                    {{"layer", 1}, {"variants", {variant(0, 0.0, 2.0), variant(1, 3.0, 1.0)}}}}}};
  char* out = nullptr;
  const puzzle_status st = puzzle_solve_problem_json(problem.dump().c_str(), &out);
  if (st != PUZZLE_OK) FAIL(puzzle_last_error());
  json sol = TakeJson(out);
  REQUIRE(sol.at("feasible").get<bool>());
  CHECK(sol.at("objective").get<double>() == doctest::Approx(1.0));

  problem["limits"]["memory_max_bytes"] = 1.0;
  REQUIRE(puzzle_solve_problem_json(problem.dump().c_str(), &out) == PUZZLE_OK);
  CHECK_FALSE(TakeJson(out).at("feasible").get<bool>());
}

TEST_CASE("staged calls reproduce the pipeline") {
  const std::string dir = FreshDir("capi_pipeline");
  puzzle_config* config = TinyConfig(2, dir);
  char* rj = nullptr;
  char* rt = nullptr;
  const puzzle_status st = puzzle_pipeline_run(config, &rj, &rt);
  if (st != PUZZLE_OK) FAIL(puzzle_last_error());
  const json report = TakeJson(rj);
  CHECK(TakeString(rt).find("fast") != std::string::npos);
  const json& slice = report.at("slices").at(0);
  REQUIRE(slice.at("feasible").get<bool>());

  // Parent trained afresh matches the pipeline's parent.
  puzzle_model* parent = nullptr;
  puzzle_model* fresh = nullptr;
  REQUIRE(puzzle_model_load((dir + "/parent.pzt").c_str(), &parent) == PUZZLE_OK);
  REQUIRE(puzzle_model_train_parent(config, &fresh) == PUZZLE_OK);
  char* m = nullptr;
  REQUIRE(puzzle_model_evaluate(config, parent, fresh, &m) == PUZZLE_OK);
  const json fresh_metrics = TakeJson(m);
  CHECK(fresh_metrics.at("kl").get<double>() == 0.0);
  CHECK(fresh_metrics.at("lm_loss") == report.at("parent_metrics").at("lm_loss"));

  // Assembling the persisted solution reproduces the pre-GKD metrics.
  puzzle_library* library = nullptr;
  REQUIRE(puzzle_library_load((dir + "/library").c_str(), &library) == PUZZLE_OK);
  std::ifstream sol_in(dir + "/solutions/fast.json");
  const std::string sol_text((std::istreambuf_iterator<char>(sol_in)),
                             std::istreambuf_iterator<char>());
  puzzle_model* child = nullptr;
  REQUIRE(puzzle_model_assemble(parent, library, sol_text.c_str(), &child) == PUZZLE_OK);
  REQUIRE(puzzle_model_evaluate(config, parent, child, &m) == PUZZLE_OK);
  CHECK(TakeJson(m) == slice.at("before_gkd"));

  // The API's GKD seed differs from the per-slice one; KL must still drop.
  puzzle_model* tuned = nullptr;
  char* hist = nullptr;
  REQUIRE(puzzle_model_gkd(config, parent, child, &tuned, &hist) == PUZZLE_OK);
  const json history = TakeJson(hist);
  REQUIRE(!history.at("history").empty());
  CHECK(history.at("history").back().at("validation_kld").get<double>() >= 0.0);
  REQUIRE(puzzle_model_evaluate(config, parent, tuned, &m) == PUZZLE_OK);
  CHECK(TakeJson(m).at("kl").get<double>() <= slice.at("before_gkd").at("kl").get<double>());

  // Ledger and table rebuilt through the API match the persisted ones.
  puzzle_space* space = nullptr;
  REQUIRE(puzzle_space_from_config(config, &space) == PUZZLE_OK);
  puzzle_ledger* persisted = nullptr;
  REQUIRE(puzzle_ledger_load((dir + "/ledger.json").c_str(), space, &persisted) == PUZZLE_OK);
  puzzle_ledger* scored = nullptr;
  REQUIRE(puzzle_ledger_score(config, parent, library, &scored) == PUZZLE_OK);
  const std::string lp = dir + "/api/ledger_a.json";
  const std::string lq = dir + "/api/ledger_b.json";
  REQUIRE(puzzle_ledger_save(persisted, lp.c_str()) == PUZZLE_OK);
  REQUIRE(puzzle_ledger_save(scored, lq.c_str()) == PUZZLE_OK);
  std::ifstream la(lp);
  std::ifstream lb(lq);
  CHECK(json::parse(la) == json::parse(lb));

  puzzle_table* table = nullptr;
  REQUIRE(puzzle_table_analytic(config, space, &table) == PUZZLE_OK);
  const std::string tp = dir + "/api/resources.csv";
  REQUIRE(puzzle_table_save(table, tp.c_str()) == PUZZLE_OK);
  puzzle_table* ingested = nullptr;
  char* ingest_report = nullptr;
  REQUIRE(puzzle_table_ingest((dir + "/resources.csv").c_str(), space, &ingested,
                              &ingest_report) == PUZZLE_OK);
  CHECK(TakeJson(ingest_report).at("filled").get<int>() == 0);

  // Problem file over the persisted tables.
  json problem = {{"space", "../space.json"},
                  {"ledger", "../ledger.json"},
                  {"resources", "resources.csv"},
                  {"batches", {1, 2, 4}},
                  {"limits", slice.at("limits")},
                  {"num_solutions", 2}};
  const std::string pp = dir + "/api/problem.json";
  std::ofstream(pp) << problem.dump(2);
  char* result = nullptr;
  const puzzle_status ss = puzzle_solve_problem_file(pp.c_str(), 1, 1, &result);
  if (ss != PUZZLE_OK) FAIL(puzzle_last_error());
  const json solved = TakeJson(result);
  CHECK(solved.at("batch") == slice.at("batch"));
  REQUIRE(!solved.at("solutions").empty());
  CHECK(solved.at("solutions").at(0).at("architecture") == slice.at("architecture"));

  char* baselines = nullptr;
  REQUIRE(puzzle_compare_baselines(config, 0, 0, &baselines) == PUZZLE_OK);
  const json table_json = TakeJson(baselines);
  REQUIRE(table_json.size() == 1);
  CHECK(table_json.at(0).at("rows") == slice.at("baselines"));

  puzzle_table_free(ingested);
  puzzle_table_free(table);
  puzzle_ledger_free(scored);
  puzzle_ledger_free(persisted);
  puzzle_space_free(space);
  puzzle_model_free(tuned);
  puzzle_model_free(child);
  puzzle_library_free(library);
  puzzle_model_free(fresh);
  puzzle_model_free(parent);
  puzzle_config_free(config);
}

TEST_CASE("assemble rejects malformed architectures") {
  const std::string dir = FreshDir("capi_assemble");
  puzzle_config* config = TinyConfig(3, dir);
  puzzle_model* parent = nullptr;
  REQUIRE(puzzle_model_train_parent(config, &parent) == PUZZLE_OK);
  puzzle_space* space = nullptr;
  REQUIRE(puzzle_space_from_config(config, &space) == PUZZLE_OK);
  puzzle_library* library = nullptr;
  REQUIRE(puzzle_library_build(config, parent, space, 1, &library) == PUZZLE_OK);
  puzzle_model* child = nullptr;
  CHECK(puzzle_model_assemble(parent, library, "[[0, 0]]", &child) != PUZZLE_OK);
  CHECK(child == nullptr);
  CHECK(puzzle_model_assemble(parent, library, "{\"solutions\": []}", &child) ==
        PUZZLE_INFEASIBLE);
  CHECK(puzzle_model_assemble(parent, library, "{\"x\": 1}", &child) == PUZZLE_SCHEMA);
  REQUIRE(puzzle_model_assemble(parent, library, "[[0, 0], [0, 0]]", &child) == PUZZLE_OK);
  const std::string path = dir + "/lib";
  REQUIRE(puzzle_library_save(library, path.c_str()) == PUZZLE_OK);
  puzzle_model_free(child);
  puzzle_library_free(library);
  puzzle_space_free(space);
  puzzle_model_free(parent);
  puzzle_config_free(config);
}
