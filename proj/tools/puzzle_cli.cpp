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

// Command-line front end. Every stage of the pipeline is a subcommand; all
// work goes through the C interface of libpuzzle.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "puzzle/puzzle.h"

namespace {

using nlohmann::json;

// Raised on a failed C call; carries the status as the exit code.
struct CallError {
  puzzle_status status;
};

void Check(puzzle_status status, const std::string& what) {
  if (status == PUZZLE_OK) return;
  std::cerr << "puzzle: " << what << ": " << puzzle_status_name(status) << ": "
            << puzzle_last_error() << "\n";
  throw CallError{status};
}

template <typename T, void (*Free)(T*)>
struct Deleter {
  void operator()(T* p) const { Free(p); }
};
using Config = std::unique_ptr<puzzle_config, Deleter<puzzle_config, puzzle_config_free>>;
using Space = std::unique_ptr<puzzle_space, Deleter<puzzle_space, puzzle_space_free>>;
using Model = std::unique_ptr<puzzle_model, Deleter<puzzle_model, puzzle_model_free>>;
using Library = std::unique_ptr<puzzle_library, Deleter<puzzle_library, puzzle_library_free>>;
using Table = std::unique_ptr<puzzle_table, Deleter<puzzle_table, puzzle_table_free>>;
using Ledger = std::unique_ptr<puzzle_ledger, Deleter<puzzle_ledger, puzzle_ledger_free>>;

std::string Take(char* s) {
  std::string out = s != nullptr ? s : "";
  puzzle_string_free(s);
  return out;
}

std::string ReadFile(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    std::cerr << "puzzle: cannot read " << path << "\n";
    throw CallError{PUZZLE_IO};
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Writes to `path`, or stdout when empty.
void Emit(const std::string& text, const std::string& path) {
  if (path.empty()) {
    std::cout << text << "\n";
    return;
  }
  std::ofstream out(path, std::ios::binary);
  out << text << "\n";
  if (!out) {
    std::cerr << "puzzle: cannot write " << path << "\n";
    throw CallError{PUZZLE_IO};
  }
}

struct Common {
  std::string config;
  std::string output_dir;
  int workers = 0;
};

void AddConfig(CLI::App* cmd, Common& c, bool required = true) {
  CLI::Option* o = cmd->add_option("-c,--config", c.config, "pipeline configuration JSON");
  if (required) o->required();
  o->check(CLI::ExistingFile);
  cmd->add_option("--workers", c.workers, "worker threads (overrides the config)")
      ->check(CLI::PositiveNumber);
}

Config LoadConfig(const Common& c) {
  puzzle_config* raw = nullptr;
  Check(puzzle_config_load(c.config.c_str(), &raw), "load config");
  Config config(raw);
  if (c.workers > 0) Check(puzzle_config_set_workers(config.get(), c.workers), "workers");
  if (!c.output_dir.empty()) {
    Check(puzzle_config_set_output_dir(config.get(), c.output_dir.c_str()), "output dir");
  }
  return config;
}

Space LoadSpace(const std::string& path, const puzzle_config* config) {
  puzzle_space* raw = nullptr;
  if (!path.empty()) {
    Check(puzzle_space_load(path.c_str(), &raw), "load space");
  } else {
    Check(puzzle_space_from_config(config, &raw), "space from config");
  }
  return Space(raw);
}

Model LoadModel(const std::string& path) {
  puzzle_model* raw = nullptr;
  Check(puzzle_model_load(path.c_str(), &raw), "load model " + path);
  return Model(raw);
}

Library LoadLibrary(const std::string& dir) {
  puzzle_library* raw = nullptr;
  Check(puzzle_library_load(dir.c_str(), &raw), "load library " + dir);
  return Library(raw);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Decomposed architecture search for toy transformers"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(puzzle_version()));

  // init-space
  CLI::App* init = app.add_subcommand("init-space", "write a search space file");
  Common init_c;
  std::string init_out;
  int layers = 0, q = 8, d = 8, kv = 8, inter = 256;
  AddConfig(init, init_c, false);
  init->add_option("--layers", layers, "layers of the default space (without --config)");
  init->add_option("--query-heads", q, "parent query heads")->capture_default_str();
  init->add_option("--head-dim", d, "parent head dimension")->capture_default_str();
  init->add_option("--kv-heads", kv, "parent key/value heads")->capture_default_str();
  init->add_option("--intermediate", inter, "parent FFN width")->capture_default_str();
  init->add_option("-o,--out", init_out, "output space JSON")->required();

  // train-parent
  CLI::App* train = app.add_subcommand("train-parent", "train the toy parent model");
  Common train_c;
  std::string train_out;
  AddConfig(train, train_c);
  train->add_option("-o,--out", train_out, "output model (.pzt)")->required();

  // build-library
  CLI::App* build = app.add_subcommand("build-library", "initialize and train the block library");
  Common build_c;
  std::string build_parent, build_space, build_out, build_mode = "decoupled";
  bool init_only = false, dry_run = false;
  AddConfig(build, build_c, false);
  build->add_option("--parent", build_parent, "parent model (.pzt)")->check(CLI::ExistingFile);
  build->add_option("--space", build_space, "search space JSON (default: from config)");
  build->add_option("-o,--out", build_out, "output library directory");
  build->add_flag("--init-only", init_only, "skip BLD and keep initialized weights");
  build->add_flag("--dry-run", dry_run, "print the BLD job counts and exit");
  build->add_option("--mode", build_mode, "BLD mode for --dry-run")
      ->check(CLI::IsMember({"decoupled", "coupled"}))
      ->capture_default_str();

  // measure
  CLI::App* measure = app.add_subcommand("measure", "build or ingest the resource table");
  Common measure_c;
  std::string measure_space, measure_ingest, measure_out, measure_report;
  AddConfig(measure, measure_c, false);
  measure->add_option("--space", measure_space, "search space JSON (default: from config)");
  measure->add_option("--ingest", measure_ingest, "measurements file (CSV or JSON rows)")
      ->check(CLI::ExistingFile);
  measure->add_option("--ingest-report", measure_report, "write the ingest report JSON");
  measure->add_option("-o,--out", measure_out, "output table (.csv or .json)")->required();

  // score
  CLI::App* score = app.add_subcommand("score", "compute the replace-1-block ledger");
  Common score_c;
  std::string score_parent, score_library, score_out;
  AddConfig(score, score_c);
  score->add_option("--parent", score_parent, "parent model (.pzt)")->required();
  score->add_option("--library", score_library, "library directory")->required();
  score->add_option("-o,--out", score_out, "output ledger JSON")->required();

  // solve / sweep
  CLI::App* solve = app.add_subcommand("solve", "solve a problem file at its first batch size");
  std::string solve_problem, solve_out;
  solve->add_option("problem", solve_problem, "problem JSON")->required()->check(
      CLI::ExistingFile);
  solve->add_option("-o,--out", solve_out, "result JSON (default: stdout)");

  CLI::App* sweep = app.add_subcommand("sweep", "solve a problem file at every batch size");
  std::string sweep_problem, sweep_out;
  int sweep_workers = 1;
  sweep->add_option("problem", sweep_problem, "problem JSON")->required()->check(
      CLI::ExistingFile);
  sweep->add_option("-o,--out", sweep_out, "result JSON (default: stdout)");
  sweep->add_option("--workers", sweep_workers, "parallel batch solves")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();

  // assemble
  CLI::App* assemble = app.add_subcommand("assemble", "build a child from a solution");
  std::string asm_parent, asm_library, asm_solution, asm_out;
  assemble->add_option("--parent", asm_parent, "parent model (.pzt)")->required();
  assemble->add_option("--library", asm_library, "library directory")->required();
  assemble->add_option("--solution", asm_solution,
                       "architecture, solution or solve result JSON")
      ->required()
      ->check(CLI::ExistingFile);
  assemble->add_option("-o,--out", asm_out, "output model (.pzt)")->required();

  // gkd
  CLI::App* gkd = app.add_subcommand("gkd", "uptrain a child against the parent");
  Common gkd_c;
  std::string gkd_parent, gkd_child, gkd_out, gkd_history;
  AddConfig(gkd, gkd_c);
  gkd->add_option("--parent", gkd_parent, "parent model (.pzt)")->required();
  gkd->add_option("--child", gkd_child, "child model (.pzt)")->required();
  gkd->add_option("-o,--out", gkd_out, "output model (.pzt)")->required();
  gkd->add_option("--history", gkd_history, "write the validation history JSON");

  // report
  CLI::App* report = app.add_subcommand("report", "evaluate a model or summarize a run");
  Common report_c;
  std::string report_parent, report_model;
  bool report_baselines = false;
  std::uint64_t report_seed = 0;
  AddConfig(report, report_c);
  report->add_option("--output-dir", report_c.output_dir, "run directory (overrides config)");
  report->add_option("--parent", report_parent, "parent model for --model");
  report->add_option("--model", report_model, "evaluate this model against --parent");
  report->add_flag("--baselines", report_baselines, "print the baseline comparison table");
  CLI::Option* seed_opt =
      report->add_option("--seed", report_seed, "baseline seed (overrides the config)");

  // pipeline
  CLI::App* pipeline = app.add_subcommand("pipeline", "run or resume every stage");
  Common pipe_c;
  bool pipe_json = false;
  AddConfig(pipeline, pipe_c);
  pipeline->add_option("--output-dir", pipe_c.output_dir, "output directory (overrides config)");
  pipeline->add_flag("--json", pipe_json, "print report.json instead of the text summary");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*init) {
      puzzle_space* raw = nullptr;
      if (!init_c.config.empty()) {
        Config config = LoadConfig(init_c);
        Check(puzzle_space_from_config(config.get(), &raw), "space from config");
      } else {
        if (layers < 1) {
          std::cerr << "puzzle: init-space needs --config or --layers\n";
          return PUZZLE_INVALID_ARGUMENT;
        }
        Check(puzzle_space_default(layers, q, d, kv, inter, &raw), "default space");
      }
      Space space(raw);
      Check(puzzle_space_save(space.get(), init_out.c_str()), "save space");
      int n = 0;
      double card = 0.0;
      Check(puzzle_space_num_layers(space.get(), &n), "layers");
      Check(puzzle_space_cardinality_log10(space.get(), &card), "cardinality");
      std::printf("layers %d, log10 architectures %.4f\n", n, card);
    } else if (*train) {
      Config config = LoadConfig(train_c);
      puzzle_model* raw = nullptr;
      Check(puzzle_model_train_parent(config.get(), &raw), "train parent");
      Model model(raw);
      Check(puzzle_model_save(model.get(), train_out.c_str()), "save parent");
    } else if (*build) {
      Config config;
      if (!build_c.config.empty()) config = LoadConfig(build_c);
      if (build_space.empty() && !config) {
        std::cerr << "puzzle: build-library needs --config or --space\n";
        return PUZZLE_INVALID_ARGUMENT;
      }
      Space space = LoadSpace(build_space, config.get());
      if (dry_run) {
        int sub = 0, pair = 0;
        Check(puzzle_bld_plan_counts(space.get(), build_mode.c_str(), &sub, &pair), "plan");
        std::printf("mode %s: %d subblock jobs, %d pair jobs, %d total\n", build_mode.c_str(),
                    sub, pair, sub + pair);
        return 0;
      }
      if (!config || build_parent.empty() || build_out.empty()) {
        std::cerr << "puzzle: build-library needs --config, --parent and --out\n";
        return PUZZLE_INVALID_ARGUMENT;
      }
      Model parent = LoadModel(build_parent);
      puzzle_library* raw = nullptr;
      Check(puzzle_library_build(config.get(), parent.get(), space.get(), init_only ? 1 : 0,
                                 &raw),
            "build library");
      Library library(raw);
      Check(puzzle_library_save(library.get(), build_out.c_str()), "save library");
    } else if (*measure) {
      Config config;
      if (!measure_c.config.empty()) config = LoadConfig(measure_c);
      if (measure_space.empty() && !config) {
        std::cerr << "puzzle: measure needs --config or --space\n";
        return PUZZLE_INVALID_ARGUMENT;
      }
      Space space = LoadSpace(measure_space, config.get());
      puzzle_table* raw = nullptr;
      if (!measure_ingest.empty()) {
        char* rep = nullptr;
        Check(puzzle_table_ingest(measure_ingest.c_str(), space.get(), &raw, &rep), "ingest");
        const std::string text = Take(rep);
        if (!measure_report.empty()) Emit(text, measure_report);
      } else {
        if (!config) {
          std::cerr << "puzzle: the analytic table needs --config\n";
          return PUZZLE_INVALID_ARGUMENT;
        }
        Check(puzzle_table_analytic(config.get(), space.get(), &raw), "analytic table");
      }
      Table table(raw);
      Check(puzzle_table_save(table.get(), measure_out.c_str()), "save table");
    } else if (*score) {
      Config config = LoadConfig(score_c);
      Model parent = LoadModel(score_parent);
      Library library = LoadLibrary(score_library);
      puzzle_ledger* raw = nullptr;
      Check(puzzle_ledger_score(config.get(), parent.get(), library.get(), &raw), "score");
      Ledger ledger(raw);
      Check(puzzle_ledger_save(ledger.get(), score_out.c_str()), "save ledger");
    } else if (*solve || *sweep) {
      const bool is_sweep = static_cast<bool>(*sweep);
      const std::string& path = is_sweep ? sweep_problem : solve_problem;
      char* result = nullptr;
      Check(puzzle_solve_problem_file(path.c_str(), is_sweep ? 1 : 0,
                                      is_sweep ? sweep_workers : 1, &result),
            "solve");
      const std::string text = Take(result);
      Emit(text, is_sweep ? sweep_out : solve_out);
      if (json::parse(text).at("batch").is_null()) {
        std::cerr << "puzzle: infeasible\n";
        return PUZZLE_INFEASIBLE;
      }
    } else if (*assemble) {
      Model parent = LoadModel(asm_parent);
      Library library = LoadLibrary(asm_library);
      const std::string arch = ReadFile(asm_solution);
      puzzle_model* raw = nullptr;
      Check(puzzle_model_assemble(parent.get(), library.get(), arch.c_str(), &raw), "assemble");
      Model child(raw);
      Check(puzzle_model_save(child.get(), asm_out.c_str()), "save child");
    } else if (*gkd) {
      Config config = LoadConfig(gkd_c);
      Model parent = LoadModel(gkd_parent);
      Model child = LoadModel(gkd_child);
      puzzle_model* raw = nullptr;
      char* hist = nullptr;
      Check(puzzle_model_gkd(config.get(), parent.get(), child.get(), &raw,
                             gkd_history.empty() ? nullptr : &hist),
            "gkd");
      Model tuned(raw);
      if (!gkd_history.empty()) Emit(Take(hist), gkd_history);
      Check(puzzle_model_save(tuned.get(), gkd_out.c_str()), "save model");
    } else if (*report) {
      Config config = LoadConfig(report_c);
      if (!report_model.empty()) {
        if (report_parent.empty()) {
          std::cerr << "puzzle: --model needs --parent\n";
          return PUZZLE_INVALID_ARGUMENT;
        }
        Model parent = LoadModel(report_parent);
        Model model = LoadModel(report_model);
        char* m = nullptr;
        Check(puzzle_model_evaluate(config.get(), parent.get(), model.get(), &m), "evaluate");
        Emit(Take(m), "");
      } else if (report_baselines) {
        char* table = nullptr;
        Check(puzzle_compare_baselines(config.get(), seed_opt->count() > 0 ? 1 : 0,
                                       report_seed, &table),
              "baselines");
        Emit(Take(table), "");
      } else {
        char* cfg = nullptr;
        Check(puzzle_config_to_json(config.get(), &cfg), "config");
        const std::string dir = json::parse(Take(cfg)).at("output_dir").get<std::string>();
        std::cout << ReadFile(dir + "/report.txt");
      }
    } else if (*pipeline) {
      Config config = LoadConfig(pipe_c);
      char* rj = nullptr;
      char* rt = nullptr;
      Check(puzzle_pipeline_run(config.get(), &rj, &rt), "pipeline");
      const std::string j = Take(rj);
      const std::string t = Take(rt);
      std::cout << (pipe_json ? j + "\n" : t);
    }
  } catch (const CallError& e) {
    return static_cast<int>(e.status);
  } catch (const std::exception& e) {
    std::cerr << "puzzle: " << e.what() << "\n";
    return PUZZLE_INTERNAL;
  }
  return 0;
}
