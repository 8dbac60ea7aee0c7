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

/*
 * C interface to the Puzzle decomposed architecture search library.
 *
 * Objects are opaque handles created by *_load, *_create or stage
 * functions and released with the matching *_free (NULL is accepted).
 * Every fallible call returns a puzzle_status; on failure the message is
 * available from puzzle_last_error() on the calling thread until the next
 * call. Strings returned through char** parameters are heap copies owned
 * by the caller and released with puzzle_string_free. Handles are not
 * synchronized: share one across threads only for read-only calls.
 */

#ifndef PUZZLE_PUZZLE_H_
#define PUZZLE_PUZZLE_H_

#include <stdint.h>

#if defined(_WIN32)
#define PUZZLE_API __declspec(dllexport)
#else
#define PUZZLE_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum puzzle_status {
  PUZZLE_OK = 0,
  PUZZLE_INVALID_ARGUMENT = 1,
  PUZZLE_OUT_OF_RANGE = 2,
  PUZZLE_SHAPE_MISMATCH = 3,
  PUZZLE_INFEASIBLE = 4,
  PUZZLE_IO = 5,
  PUZZLE_SCHEMA = 6,
  PUZZLE_NOT_FOUND = 7,
  PUZZLE_DEGENERATE = 8,
  PUZZLE_INTERNAL = 9
} puzzle_status;

PUZZLE_API const char* puzzle_version(void);
PUZZLE_API const char* puzzle_status_name(puzzle_status status);
/* Message of the last failed call on this thread; "" after a success. */
PUZZLE_API const char* puzzle_last_error(void);
PUZZLE_API void puzzle_string_free(char* s);

typedef struct puzzle_config puzzle_config;
typedef struct puzzle_space puzzle_space;
typedef struct puzzle_model puzzle_model;
typedef struct puzzle_library puzzle_library;
typedef struct puzzle_table puzzle_table;
typedef struct puzzle_ledger puzzle_ledger;

/* Pipeline configuration. Relative paths inside a file resolve against
 * the file's directory; for JSON text against base_dir (NULL: "."). */
PUZZLE_API puzzle_status puzzle_config_load(const char* path, puzzle_config** out);
PUZZLE_API puzzle_status puzzle_config_from_json(const char* json, const char* base_dir,
                                                 puzzle_config** out);
PUZZLE_API puzzle_status puzzle_config_to_json(const puzzle_config* config, char** out);
PUZZLE_API puzzle_status puzzle_config_hash(const puzzle_config* config, char** out);
PUZZLE_API puzzle_status puzzle_config_set_output_dir(puzzle_config* config, const char* dir);
PUZZLE_API puzzle_status puzzle_config_set_workers(puzzle_config* config, int workers);
PUZZLE_API void puzzle_config_free(puzzle_config* config);

/* Search spaces. */
PUZZLE_API puzzle_status puzzle_space_from_config(const puzzle_config* config,
                                                  puzzle_space** out);
PUZZLE_API puzzle_status puzzle_space_default(int num_layers, int query_heads, int head_dim,
                                              int kv_heads, int intermediate_dim,
                                              puzzle_space** out);
PUZZLE_API puzzle_status puzzle_space_load(const char* path, puzzle_space** out);
PUZZLE_API puzzle_status puzzle_space_save(const puzzle_space* space, const char* path);
PUZZLE_API puzzle_status puzzle_space_to_json(const puzzle_space* space, char** out);
PUZZLE_API puzzle_status puzzle_space_num_layers(const puzzle_space* space, int* out);
PUZZLE_API puzzle_status puzzle_space_layer_options(const puzzle_space* space, int layer,
                                                    int* attention, int* ffn);
PUZZLE_API puzzle_status puzzle_space_cardinality_log10(const puzzle_space* space,
                                                        double* out);
PUZZLE_API void puzzle_space_free(puzzle_space* space);

/* Models. Training and evaluation use the configuration's corpora. */
PUZZLE_API puzzle_status puzzle_model_train_parent(const puzzle_config* config,
                                                   puzzle_model** out);
PUZZLE_API puzzle_status puzzle_model_load(const char* path, puzzle_model** out);
PUZZLE_API puzzle_status puzzle_model_save(const puzzle_model* model, const char* path);
/* JSON object with lm_loss, kl, accuracy and the composite proxies. */
PUZZLE_API puzzle_status puzzle_model_evaluate(const puzzle_config* config,
                                               const puzzle_model* parent,
                                               const puzzle_model* model, char** out);
/* architecture_json: one [attention, ffn] menu-index pair per layer, or a
 * solution, slice or solve-result object carrying it (under
 * "architecture", or the first entry of "solutions"). */
PUZZLE_API puzzle_status puzzle_model_assemble(const puzzle_model* parent,
                                               const puzzle_library* library,
                                               const char* architecture_json,
                                               puzzle_model** out);
/* Uptrains `child` against `parent`; history_json may be NULL. */
PUZZLE_API puzzle_status puzzle_model_gkd(const puzzle_config* config,
                                          const puzzle_model* parent,
                                          const puzzle_model* child, puzzle_model** out,
                                          char** history_json);
PUZZLE_API void puzzle_model_free(puzzle_model* model);

/* Block libraries. mode is "decoupled" or "coupled". */
PUZZLE_API puzzle_status puzzle_bld_plan_counts(const puzzle_space* space, const char* mode,
                                                int* subblock_jobs, int* pair_jobs);
/* init_only != 0 skips BLD training and keeps the initialized weights. */
PUZZLE_API puzzle_status puzzle_library_build(const puzzle_config* config,
                                              const puzzle_model* parent,
                                              const puzzle_space* space, int init_only,
                                              puzzle_library** out);
PUZZLE_API puzzle_status puzzle_library_load(const char* dir, puzzle_library** out);
PUZZLE_API puzzle_status puzzle_library_save(const puzzle_library* library, const char* dir);
PUZZLE_API void puzzle_library_free(puzzle_library* library);

/* Resource tables: analytic from the configuration's scenario, hardware
 * and batches, or ingested measurements (CSV or JSON rows). */
PUZZLE_API puzzle_status puzzle_table_analytic(const puzzle_config* config,
                                               const puzzle_space* space, puzzle_table** out);
PUZZLE_API puzzle_status puzzle_table_ingest(const char* path, const puzzle_space* space,
                                             puzzle_table** out, char** report_json);
/* ".csv" writes CSV, anything else JSON. */
PUZZLE_API puzzle_status puzzle_table_save(const puzzle_table* table, const char* path);
PUZZLE_API void puzzle_table_free(puzzle_table* table);

/* Replace-1-block score ledgers with the configuration's metric. */
PUZZLE_API puzzle_status puzzle_ledger_score(const puzzle_config* config,
                                             const puzzle_model* parent,
                                             const puzzle_library* library,
                                             puzzle_ledger** out);
PUZZLE_API puzzle_status puzzle_ledger_load(const char* path, const puzzle_space* space,
                                            puzzle_ledger** out);
PUZZLE_API puzzle_status puzzle_ledger_save(const puzzle_ledger* ledger, const char* path);
PUZZLE_API void puzzle_ledger_free(puzzle_ledger* ledger);

/* Problem-file solves. sweep != 0 runs the batch sweep. An infeasible
 * problem is still PUZZLE_OK; the result reports it. */
PUZZLE_API puzzle_status puzzle_solve_problem_file(const char* path, int sweep, int workers,
                                                   char** result_json);
/* Solves one MIP problem given as JSON (the solver's problem schema). */
PUZZLE_API puzzle_status puzzle_solve_problem_json(const char* problem_json,
                                                   char** solution_json);

/* Full pipeline; report_text may be NULL. */
PUZZLE_API puzzle_status puzzle_pipeline_run(const puzzle_config* config, char** report_json,
                                             char** report_text);
/* Baseline table from a finished run. use_seed != 0 overrides the
 * configured baseline seed. */
PUZZLE_API puzzle_status puzzle_compare_baselines(const puzzle_config* config, int use_seed,
                                                  uint64_t seed, char** table_json);

#ifdef __cplusplus
}
#endif

#endif /* PUZZLE_PUZZLE_H_ */
