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

#include "puzzle/solver.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>

#include "puzzle/common.hpp"

namespace puzzle {

using nlohmann::json;

namespace {

json FiniteOrNull(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

double ReadLimit(const json& doc, const char* key, double fallback) {
  if (!doc.contains(key) || doc.at(key).is_null()) return fallback;
  return doc.at(key).get<double>();
}

}  // namespace

void Limits::Validate() const {
  Require(memory_max > 0 && latency_max > 0 && throughput_min >= 0 &&
              !std::isnan(memory_max) && !std::isnan(latency_max) &&
              std::isfinite(throughput_min),
          ErrorCode::kInvalidArgument,
          "limits must be positive (throughput_min may be 0, maxima may be unlimited)");
}

json Limits::ToJson() const {
  return {{"memory_max_bytes", FiniteOrNull(memory_max)},
          {"throughput_min_tokens_per_second", throughput_min},
          {"latency_max_seconds", FiniteOrNull(latency_max)}};
}

Limits Limits::FromJson(const json& doc) {
  Limits l;
  try {
    l.memory_max = ReadLimit(doc, "memory_max_bytes", kUnlimited);
    l.throughput_min = ReadLimit(doc, "throughput_min_tokens_per_second", 0.0);
    l.latency_max = ReadLimit(doc, "latency_max_seconds", kUnlimited);
  } catch (const json::exception& e) {
    Fail(ErrorCode::kSchema, std::string("limits: ") + e.what());
  }
  l.Validate();
  return l;
}

const char* EncodingName(Encoding e) {
  return e == Encoding::kBlock ? "block" : "subblock_groups";
}

Encoding ParseEncoding(const std::string& name) {
  if (name == "block") return Encoding::kBlock;
  if (name == "subblock_groups") return Encoding::kSubblockGroups;
  Fail(ErrorCode::kInvalidArgument, "unknown encoding '" + name + "'");
}

void MipProblem::Validate() const {
  Require(!groups.empty(), ErrorCode::kInvalidArgument, "problem has no groups");
  Require(batch_size >= 1 && seq_len >= 1, ErrorCode::kInvalidArgument,
          "problem needs batch_size >= 1 and seq_len >= 1");
  Require(alpha >= 0.0 && alpha <= 1.0, ErrorCode::kInvalidArgument,
          "alpha must lie in [0, 1]");
  limits.Validate();
  for (const MipGroup& g : groups) {
    Require(g.layer >= 0 && g.layer < num_layers, ErrorCode::kInvalidArgument,
            "group layer out of range");
    Require(!g.variants.empty(), ErrorCode::kInvalidArgument,
            "group at layer " + std::to_string(g.layer) + " has no variants");
    for (const MipVariant& v : g.variants) {
      Require(std::isfinite(v.score), ErrorCode::kInvalidArgument,
              "non-finite score for " + v.id);
      Require(v.mem_params >= 0 && v.mem_kv >= 0 && v.runtime >= 0 &&
                  std::isfinite(v.mem_params) && std::isfinite(v.mem_kv) &&
                  std::isfinite(v.runtime),
              ErrorCode::kInvalidArgument, "resources of " + v.id + " must be finite and >= 0");
    }
  }
  for (const Architecture& a : previous) {
    Require(static_cast<int>(a.choices.size()) == num_layers, ErrorCode::kInvalidArgument,
            "previous solution has the wrong number of layers");
  }
}

int MipProblem::MaxSharedGroups() const {
  return static_cast<int>(std::floor(alpha * static_cast<double>(groups.size()) + 1e-9));
}

json MipProblem::ToJson() const {
  json gs = json::array();
  for (const MipGroup& g : groups) {
    json vs = json::array();
    for (const MipVariant& v : g.variants) {
      vs.push_back({{"attention", v.attention},
                    {"ffn", v.ffn},
                    {"id", v.id},
                    {"score", v.score},
                    {"mem_params", v.mem_params},
                    {"mem_kv", v.mem_kv},
                    {"runtime", v.runtime}});
    }
    gs.push_back({{"layer", g.layer}, {"variants", vs}});
  }
  json prev = json::array();
  for (const Architecture& a : previous) prev.push_back(a.ToJson());
  return {{"num_layers", num_layers},
          {"batch_size", batch_size},
          {"seq_len", seq_len},
          {"limits", limits.ToJson()},
          {"polarity", PolarityName(polarity)},
          {"alpha", alpha},
          {"previous", prev},
          {"groups", gs}};
}

MipProblem MipProblem::FromJson(const json& doc) {
  MipProblem p;
  try {
    p.num_layers = doc.at("num_layers").get<int>();
    p.batch_size = doc.at("batch_size").get<int>();
    p.seq_len = doc.at("seq_len").get<int>();
    p.limits = Limits::FromJson(doc.at("limits"));
    const std::string pol = doc.at("polarity").get<std::string>();
    Require(pol == "cost" || pol == "benefit", ErrorCode::kSchema,
            "polarity must be cost or benefit");
    p.polarity = pol == "cost" ? Polarity::kCost : Polarity::kBenefit;
    p.alpha = doc.value("alpha", 1.0);
    for (const json& a : doc.value("previous", json::array())) {
      p.previous.push_back(Architecture::FromJson(a));
    }
    for (const json& g : doc.at("groups")) {
      MipGroup group;
      group.layer = g.at("layer").get<int>();
      for (const json& v : g.at("variants")) {
        group.variants.push_back({v.at("attention").get<int>(), v.at("ffn").get<int>(),
                                  v.at("id").get<std::string>(), v.at("score").get<double>(),
                                  v.at("mem_params").get<double>(),
                                  v.at("mem_kv").get<double>(), v.at("runtime").get<double>()});
      }
      p.groups.push_back(std::move(group));
    }
  } catch (const json::exception& e) {
    Fail(ErrorCode::kSchema, std::string("problem: ") + e.what());
  }
  p.Validate();
  return p;
}

LinearBudgets LinearizeConstraints(const MipProblem& problem) {
  Require(problem.batch_size >= 1 && problem.seq_len >= 1, ErrorCode::kInvalidArgument,
          "linearization needs b >= 1 and seq_len >= 1");
  problem.limits.Validate();
  LinearBudgets b;
  b.memory = problem.limits.memory_max;
  b.latency = problem.limits.latency_max;
  if (problem.limits.throughput_min > 0) {
    b.runtime_from_throughput = static_cast<double>(problem.batch_size) * problem.seq_len /
                                problem.limits.throughput_min;
  }
  b.runtime = std::min(b.runtime_from_throughput, b.latency);
  return b;
}

namespace {

double OptionMemory(const MipProblem& p, const MipVariant& v) {
  return v.mem_params + static_cast<double>(p.batch_size) * v.mem_kv;
}

bool Agrees(const MipVariant& v, const LayerChoice& y) {
  return (v.attention < 0 || v.attention == y.attention) && (v.ffn < 0 || v.ffn == y.ffn);
}

constexpr std::int64_t kNoLimit = std::numeric_limits<std::int64_t>::max();
constexpr double kMaxTicks = 1e17;

// Integer form of a problem: costs rounded up, budgets rounded down, so
// integer feasibility implies real feasibility.
struct Scaled {
  int groups = 0;
  std::vector<std::vector<double>> cost;  // minimized: score or -score
  std::vector<std::vector<std::int64_t>> mem, rt;
  std::int64_t mem_budget = kNoLimit;
  std::int64_t rt_budget = kNoLimit;
  double mem_unit = 1.0;
  double rt_unit = 1e12;
  int num_previous = 0;
  int max_shared = 0;
  std::vector<std::vector<std::vector<char>>> agree;  // [g][j][y]
};

double ChooseUnit(double start, const std::vector<std::vector<double>>& values) {
  double total = 0.0;
  for (const auto& g : values) total += *std::max_element(g.begin(), g.end());
  double unit = start;
  while (total * unit > kMaxTicks && unit > 1e-30) unit /= 10.0;
  return unit;
}

std::int64_t CeilTicks(double x, double unit) {
  return static_cast<std::int64_t>(std::ceil(x * unit));
}

std::int64_t BudgetTicks(double budget, double unit) {
  if (!std::isfinite(budget)) return kNoLimit;
  const double t = std::floor(budget * unit);
  if (t > 4 * kMaxTicks) return kNoLimit;
  return static_cast<std::int64_t>(t);
}

Scaled Scale(const MipProblem& p) {
  p.Validate();
  Scaled s;
  s.groups = static_cast<int>(p.groups.size());
  std::vector<std::vector<double>> mem(s.groups), rt(s.groups);
  for (int g = 0; g < s.groups; ++g) {
    for (const MipVariant& v : p.groups[g].variants) {
      mem[g].push_back(OptionMemory(p, v));
      rt[g].push_back(v.runtime);
    }
  }
  s.cost.assign(s.groups, {});
  s.mem_unit = ChooseUnit(1.0, mem);
  s.rt_unit = ChooseUnit(1e12, rt);
  s.mem.assign(s.groups, {});
  s.rt.assign(s.groups, {});
  s.num_previous = static_cast<int>(p.previous.size());
  s.max_shared = p.MaxSharedGroups();
  s.agree.assign(s.groups, {});
  for (int g = 0; g < s.groups; ++g) {
    const MipGroup& group = p.groups[g];
    for (std::size_t j = 0; j < group.variants.size(); ++j) {
      const MipVariant& v = group.variants[j];
      s.cost[g].push_back(p.polarity == Polarity::kCost ? v.score : -v.score);
      s.mem[g].push_back(CeilTicks(mem[g][j], s.mem_unit));
      s.rt[g].push_back(CeilTicks(rt[g][j], s.rt_unit));
      std::vector<char> a(s.num_previous, 0);
      for (int y = 0; y < s.num_previous; ++y) {
        a[y] = Agrees(v, p.previous[y].choices[group.layer]) ? 1 : 0;
      }
      s.agree[g].push_back(std::move(a));
    }
  }
  const LinearBudgets b = LinearizeConstraints(p);
  s.mem_budget = BudgetTicks(b.memory, s.mem_unit);
  s.rt_budget = BudgetTicks(b.runtime, s.rt_unit);
  return s;
}

bool Fits(std::int64_t used, std::int64_t budget) {
  return budget == kNoLimit || used <= budget;
}

void CheckChoice(const MipProblem& p, const std::vector<int>& choice) {
  Require(choice.size() == p.groups.size(), ErrorCode::kInvalidArgument,
          "choice length differs from the number of groups");
  for (std::size_t g = 0; g < choice.size(); ++g) {
    Require(choice[g] >= 0 && choice[g] < static_cast<int>(p.groups[g].variants.size()),
            ErrorCode::kOutOfRange, "choice index out of range");
  }
}

}  // namespace

Totals ComputeTotals(const MipProblem& problem, const std::vector<int>& choice) {
  CheckChoice(problem, choice);
  Totals t;
  for (std::size_t g = 0; g < choice.size(); ++g) {
    const MipVariant& v = problem.groups[g].variants[choice[g]];
    t.score += v.score;
    t.memory_bytes += OptionMemory(problem, v);
    t.runtime_seconds += v.runtime;
  }
  t.throughput = t.runtime_seconds > 0
                     ? static_cast<double>(problem.batch_size) * problem.seq_len /
                           t.runtime_seconds
                     : kUnlimited;
  return t;
}

int SharedGroups(const MipProblem& problem, const std::vector<int>& choice,
                 const Architecture& arch) {
  CheckChoice(problem, choice);
  int shared = 0;
  for (std::size_t g = 0; g < choice.size(); ++g) {
    const MipGroup& group = problem.groups[g];
    shared += Agrees(group.variants[choice[g]], arch.choices.at(group.layer)) ? 1 : 0;
  }
  return shared;
}

bool IsFeasible(const MipProblem& problem, const std::vector<int>& choice) {
  CheckChoice(problem, choice);
  const Scaled s = Scale(problem);
  std::int64_t m = 0, r = 0;
  for (int g = 0; g < s.groups; ++g) {
    m += s.mem[g][choice[g]];
    r += s.rt[g][choice[g]];
  }
  if (!Fits(m, s.mem_budget) || !Fits(r, s.rt_budget)) return false;
  for (const Architecture& y : problem.previous) {
    if (SharedGroups(problem, choice, y) > s.max_shared) return false;
  }
  return true;
}

Architecture ChoiceToArchitecture(const MipProblem& problem, const std::vector<int>& choice) {
  CheckChoice(problem, choice);
  Architecture a;
  a.choices.assign(problem.num_layers, LayerChoice{-1, -1});
  for (std::size_t g = 0; g < choice.size(); ++g) {
    const MipGroup& group = problem.groups[g];
    const MipVariant& v = group.variants[choice[g]];
    if (v.attention >= 0) a.choices[group.layer].attention = v.attention;
    if (v.ffn >= 0) a.choices[group.layer].ffn = v.ffn;
  }
  for (int l = 0; l < problem.num_layers; ++l) {
    Require(a.choices[l].attention >= 0 && a.choices[l].ffn >= 0, ErrorCode::kInvalidArgument,
            "groups do not determine both subblocks of layer " + std::to_string(l));
  }
  return a;
}

json InfeasibilityReport::ToJson() const {
  return {{"binding", binding},
          {"message", message},
          {"min_memory_bytes", min_memory},
          {"memory_budget_bytes", FiniteOrNull(memory_budget)},
          {"min_runtime_seconds", min_runtime},
          {"runtime_budget_seconds", FiniteOrNull(runtime_budget)},
          {"group_min_memory_bytes", group_min_memory},
          {"group_min_runtime_seconds", group_min_runtime}};
}

json MipSolution::ToJson(bool include_timing) const {
  json stats_json = {{"nodes", stats.nodes},
                     {"pruned_bound", stats.pruned_bound},
                     {"pruned_budget", stats.pruned_budget},
                     {"pruned_diversity", stats.pruned_diversity},
                     {"dominated", stats.dominated},
                     {"lambda_runtime", stats.lambda_runtime},
                     {"lambda_memory", stats.lambda_memory},
                     {"runtime_ticks_per_second", stats.runtime_unit}};
  if (include_timing) stats_json["wall_seconds"] = stats.wall_seconds;
  json doc = {{"feasible", feasible}, {"statistics", stats_json}};
  if (feasible) {
    doc["architecture"] = architecture.ToJson();
    doc["choice"] = choice;
    doc["objective"] = objective;
    doc["totals"] = {{"score", totals.score},
                     {"memory_bytes", totals.memory_bytes},
                     {"runtime_seconds", totals.runtime_seconds},
                     {"throughput_tokens_per_second", FiniteOrNull(totals.throughput)}};
    doc["certificate"] = {{"proved_optimal", proved_optimal},
                          {"gap", FiniteOrNull(gap)},
                          {"root_bound", FiniteOrNull(stats.root_bound)}};
  } else {
    doc["infeasibility"] = infeasibility.ToJson();
  }
  return doc;
}

namespace {

class BranchAndBound {
 public:
  BranchAndBound(const Scaled& s, const SolveOptions& options, std::vector<BoundRecord>* bounds)
      : s_(s), options_(options), bounds_(bounds) {
    alive_.resize(s.groups);
    for (int g = 0; g < s.groups; ++g) {
      for (int j = 0; j < static_cast<int>(s.cost[g].size()); ++j) {
        if (options_.use_dominance && Dominated(g, j)) {
          ++stats_.dominated;
        } else {
          alive_[g].push_back(j);
        }
      }
    }
    suf_cost_.assign(s.groups + 1, 0.0);
    suf_mem_.assign(s.groups + 1, 0);
    suf_rt_.assign(s.groups + 1, 0);
    min_cost_.assign(s.groups, 0.0);
    min_mem_.assign(s.groups, 0);
    min_rt_.assign(s.groups, 0);
    for (int g = s.groups - 1; g >= 0; --g) {
      double c = INFINITY;
      std::int64_t m = kNoLimit, r = kNoLimit;
      for (int j : alive_[g]) {
        c = std::min(c, s.cost[g][j]);
        m = std::min(m, s.mem[g][j]);
        r = std::min(r, s.rt[g][j]);
      }
      min_cost_[g] = c;
      min_mem_[g] = m;
      min_rt_[g] = r;
      suf_cost_[g] = suf_cost_[g + 1] + c;
      suf_mem_[g] = suf_mem_[g + 1] + m;
      suf_rt_[g] = suf_rt_[g + 1] + r;
    }
    deviation_.assign(s.groups, std::vector<double>(s.num_previous, INFINITY));
    for (int g = 0; g < s.groups; ++g) {
      const double base = min_cost_[g];
      for (int y = 0; y < s.num_previous; ++y) {
        for (int j : alive_[g]) {
          if (!s.agree[g][j][y]) deviation_[g][y] = std::min(deviation_[g][y], s.cost[g][j]);
        }
        deviation_[g][y] -= base;
      }
    }
    if (options_.use_lagrangian) ChooseMultipliers();
    suf_lag_.assign(s.groups + 1, 0.0);
    for (int g = s.groups - 1; g >= 0; --g) suf_lag_[g] = suf_lag_[g + 1] + LagMin(g, lr_, lm_);
  }

  bool BudgetsReachable() const {
    return Fits(suf_mem_[0], s_.mem_budget) && Fits(suf_rt_[0], s_.rt_budget);
  }

  void Run() {
    cur_.assign(s_.groups, -1);
    shared_.assign(s_.num_previous, 0);
    stats_.root_bound = Bound(0, 0.0, 0, 0);
    Dfs(0, 0.0, 0, 0);
  }

  bool found() const { return !best_.empty(); }
  bool aborted() const { return aborted_; }
  const std::vector<int>& best() const { return best_; }
  double best_cost() const { return best_cost_; }
  SolveStats& stats() { return stats_; }
  double lambda_runtime() const { return lr_; }
  double lambda_memory() const { return lm_; }

 private:
  bool Dominated(int g, int b) const {
    for (int a = 0; a < static_cast<int>(s_.cost[g].size()); ++a) {
      if (a == b) continue;
      const double ca = s_.cost[g][a], cb = s_.cost[g][b];
      if (!(ca < cb || (ca == cb && a < b))) continue;
      if (s_.mem[g][a] > s_.mem[g][b] || s_.rt[g][a] > s_.rt[g][b]) continue;
      bool subset = true;
      for (int y = 0; y < s_.num_previous && subset; ++y) {
        subset = !s_.agree[g][a][y] || s_.agree[g][b][y];
      }
      if (subset) return true;
    }
    return false;
  }

  double LagMin(int g, double lr, double lm) const {
    double best = INFINITY;
    for (int j : alive_[g]) {
      best = std::min(best, s_.cost[g][j] + lr * static_cast<double>(s_.rt[g][j]) +
                                lm * static_cast<double>(s_.mem[g][j]));
    }
    return best;
  }

  double Dual(double lr, double lm) const {
    double v = 0.0;
    for (int g = 0; g < s_.groups; ++g) v += LagMin(g, lr, lm);
    if (s_.rt_budget != kNoLimit) v -= lr * static_cast<double>(s_.rt_budget);
    if (s_.mem_budget != kNoLimit) v -= lm * static_cast<double>(s_.mem_budget);
    return v;
  }

  // Coordinate-wise ternary search; the dual is concave in each multiplier.
  void ChooseMultipliers() {
    if (!BudgetsReachable()) return;
    double range = 0.0;
    for (int g = 0; g < s_.groups; ++g) {
      double lo = INFINITY, hi = -INFINITY;
      for (int j : alive_[g]) {
        lo = std::min(lo, s_.cost[g][j]);
        hi = std::max(hi, s_.cost[g][j]);
      }
      range = std::max(range, hi - lo);
    }
    if (range <= 0) return;
    auto search = [&](bool runtime) {
      double lo = 0.0, hi = range;
      for (int it = 0; it < 200; ++it) {
        const double a = lo + (hi - lo) / 3.0, b = hi - (hi - lo) / 3.0;
        const double fa = runtime ? Dual(a, lm_) : Dual(lr_, a);
        const double fb = runtime ? Dual(b, lm_) : Dual(lr_, b);
        if (fa < fb) {
          lo = a;
        } else {
          hi = b;
        }
      }
      const double x = (lo + hi) / 2.0;
      const double cur = Dual(lr_, lm_);
      if ((runtime ? Dual(x, lm_) : Dual(lr_, x)) > cur) (runtime ? lr_ : lm_) = x;
    };
    for (int round = 0; round < 4; ++round) {
      if (s_.rt_budget != kNoLimit) search(true);
      if (s_.mem_budget != kNoLimit) search(false);
    }
  }

  double Bound(int g, double partial, std::int64_t um, std::int64_t ur) const {
    double bound = partial + suf_cost_[g];
    if (lr_ > 0 || lm_ > 0) {
      double lag = suf_lag_[g];
      double slack = std::abs(lag);
      if (lr_ > 0) {
        const double t = lr_ * static_cast<double>(s_.rt_budget - ur);
        lag -= t;
        slack += std::abs(t);
      }
      if (lm_ > 0) {
        const double t = lm_ * static_cast<double>(s_.mem_budget - um);
        lag -= t;
        slack += std::abs(t);
      }
      bound = std::max(bound, partial + lag - 1e-12 * slack);
    }
    // With cuts, at least d of the remaining groups must leave each previous
    // solution; the d cheapest forced deviations are added.
    double extra = 0.0;
    for (int y = 0; y < s_.num_previous; ++y) {
      const int remaining = s_.groups - g;
      const int d = remaining - (s_.max_shared - shared_[y]);
      if (d <= 0) continue;
      regret_.clear();
      if (d > remaining) return INFINITY;
      for (int h = g; h < s_.groups; ++h) regret_.push_back(deviation_[h][y]);
      std::nth_element(regret_.begin(), regret_.begin() + (d - 1), regret_.end());
      double sum_d = 0.0;
      for (int i = 0; i < d; ++i) sum_d += regret_[i];
      extra = std::max(extra, sum_d);
    }
    bound = std::max(bound, partial + suf_cost_[g] + extra);
    if (s_.num_previous > 1) bound = std::max(bound, partial + CutDual(g));
    // Per remaining group, the best option that fits next to the cheapest
    // choices elsewhere.
    double sum = partial;
    for (int h = g; h < s_.groups; ++h) {
      const std::int64_t mem_cap = s_.mem_budget == kNoLimit
                                       ? kNoLimit
                                       : s_.mem_budget - um - (suf_mem_[g] - min_mem_[h]);
      const std::int64_t rt_cap =
          s_.rt_budget == kNoLimit ? kNoLimit : s_.rt_budget - ur - (suf_rt_[g] - min_rt_[h]);
      double c = INFINITY;
      for (int j : alive_[h]) {
        if (Fits(s_.mem[h][j], mem_cap) && Fits(s_.rt[h][j], rt_cap)) {
          c = std::min(c, s_.cost[h][j]);
        }
      }
      sum += c;
    }
    return std::max(bound, sum);
  }

  // Lagrangian bound over all cuts jointly: each cut y carries a penalty
  // mu_y per agreeing remaining group, minus mu_y times its remaining
  // allowance. Exact coordinate ascent on one mu_y at a time.
  double CutDual(int g) const {
    const int n = s_.num_previous;
    const int remaining = s_.groups - g;
    mu_.assign(n, 0.0);
    auto value = [&]() {
      double v = 0.0;
      for (int h = g; h < s_.groups; ++h) {
        double c = INFINITY;
        for (int j : alive_[h]) {
          double t = s_.cost[h][j];
          for (int y = 0; y < n; ++y) t += s_.agree[h][j][y] ? mu_[y] : 0.0;
          c = std::min(c, t);
        }
        v += c;
      }
      for (int y = 0; y < n; ++y) v -= mu_[y] * (s_.max_shared - shared_[y]);
      return v;
    };
    for (int round = 0; round < 3; ++round) {
      for (int y = 0; y < n; ++y) {
        const int cap = s_.max_shared - shared_[y];
        if (cap >= remaining) continue;
        gaps_.clear();
        for (int h = g; h < s_.groups; ++h) {
          double in = INFINITY, out = INFINITY;
          for (int j : alive_[h]) {
            double t = s_.cost[h][j];
            for (int z = 0; z < n; ++z) t += (z != y && s_.agree[h][j][z]) ? mu_[z] : 0.0;
            double& side = s_.agree[h][j][y] ? in : out;
            side = std::min(side, t);
          }
          if (in < INFINITY) gaps_.push_back(out - in);
        }
        // The dual in mu_y has slope #{gap > mu_y} - cap.
        if (static_cast<int>(gaps_.size()) <= cap) {
          mu_[y] = 0.0;
          continue;
        }
        std::nth_element(gaps_.begin(), gaps_.begin() + cap, gaps_.end(), std::greater<>());
        if (gaps_[cap] == INFINITY) return INFINITY;
        mu_[y] = std::max(0.0, gaps_[cap]);
      }
    }
    const double v = value();
    return v == v ? v - 1e-12 * (1.0 + std::abs(v)) : -INFINITY;
  }

  double Tolerance() const { return 1e-9 * (1.0 + std::abs(best_cost_)); }

  void Dfs(int g, double partial, std::int64_t um, std::int64_t ur) {
    if (aborted_) return;
    ++stats_.nodes;
    if (options_.max_nodes >= 0 && stats_.nodes > options_.max_nodes) {
      aborted_ = true;
      return;
    }
    if (g == s_.groups) {
      if (best_.empty() || partial < best_cost_) {
        best_cost_ = partial;
        best_ = cur_;
      }
      return;
    }
    const double bound = Bound(g, partial, um, ur);
    if (bounds_ != nullptr && static_cast<int>(bounds_->size()) < options_.record_bounds) {
      bounds_->push_back({std::vector<int>(cur_.begin(), cur_.begin() + g), bound});
    }
    if (bound == INFINITY || (!best_.empty() && bound > best_cost_ + Tolerance())) {
      ++stats_.pruned_bound;
      return;
    }
    for (int j : alive_[g]) {
      const std::int64_t m = um + s_.mem[g][j];
      const std::int64_t r = ur + s_.rt[g][j];
      if (!Fits(m + suf_mem_[g + 1], s_.mem_budget) || !Fits(r + suf_rt_[g + 1], s_.rt_budget)) {
        ++stats_.pruned_budget;
        continue;
      }
      bool ok = true;
      for (int y = 0; y < s_.num_previous && ok; ++y) {
        ok = !(s_.agree[g][j][y] && shared_[y] + 1 > s_.max_shared);
      }
      if (!ok) {
        ++stats_.pruned_diversity;
        continue;
      }
      for (int y = 0; y < s_.num_previous; ++y) shared_[y] += s_.agree[g][j][y];
      cur_[g] = j;
      Dfs(g + 1, partial + s_.cost[g][j], m, r);
      for (int y = 0; y < s_.num_previous; ++y) shared_[y] -= s_.agree[g][j][y];
      if (aborted_) return;
    }
  }

  const Scaled& s_;
  SolveOptions options_;
  std::vector<BoundRecord>* bounds_;
  std::vector<std::vector<int>> alive_;
  std::vector<double> suf_cost_, suf_lag_, min_cost_;
  std::vector<std::int64_t> suf_mem_, suf_rt_, min_mem_, min_rt_;
  std::vector<std::vector<double>> deviation_;  // [g][y] cheapest move off y, minus the group minimum
  mutable std::vector<double> regret_, mu_, gaps_;
  double lr_ = 0.0, lm_ = 0.0;
  std::vector<int> cur_, best_, shared_;
  double best_cost_ = INFINITY;
  bool aborted_ = false;
  SolveStats stats_;
};

InfeasibilityReport Diagnose(const MipProblem& p, const Scaled& s) {
  InfeasibilityReport r;
  const LinearBudgets b = LinearizeConstraints(p);
  r.memory_budget = b.memory;
  r.runtime_budget = b.runtime;
  for (const MipGroup& g : p.groups) {
    double m = INFINITY, t = INFINITY;
    for (const MipVariant& v : g.variants) {
      m = std::min(m, OptionMemory(p, v));
      t = std::min(t, v.runtime);
    }
    r.group_min_memory.push_back(m);
    r.group_min_runtime.push_back(t);
    r.min_memory += m;
    r.min_runtime += t;
  }
  std::int64_t mt = 0, rt = 0;
  for (int g = 0; g < s.groups; ++g) {
    mt += *std::min_element(s.mem[g].begin(), s.mem[g].end());
    rt += *std::min_element(s.rt[g].begin(), s.rt[g].end());
  }
  const bool mem_bad = !Fits(mt, s.mem_budget);
  const bool rt_bad = !Fits(rt, s.rt_budget);
  std::ostringstream msg;
  if (mem_bad || rt_bad) {
    r.binding = mem_bad && rt_bad ? "memory+runtime" : (mem_bad ? "memory" : "runtime");
    if (mem_bad) {
      msg << "memory: minimum achievable " << r.min_memory << " bytes exceeds budget "
          << r.memory_budget << " bytes. ";
    }
    if (rt_bad) {
      const char* source =
          b.runtime_from_throughput <= b.latency ? "throughput_min" : "latency_max";
      msg << "runtime: minimum achievable " << r.min_runtime << " s exceeds budget "
          << r.runtime_budget << " s (from " << source << "). ";
    }
  } else {
    r.binding = "joint";
    msg << "no selection meets memory and runtime jointly (minima " << r.min_memory
        << " bytes, " << r.min_runtime << " s). ";
  }
  msg << "per-group minima (bytes, s):";
  for (std::size_t g = 0; g < p.groups.size(); ++g) {
    msg << " [L" << p.groups[g].layer << ": " << r.group_min_memory[g] << ", "
        << r.group_min_runtime[g] << "]";
  }
  r.message = msg.str();
  return r;
}

}  // namespace

MipSolution SolveMip(const MipProblem& problem, const SolveOptions& options,
                     std::vector<BoundRecord>* bounds) {
  const auto start = std::chrono::steady_clock::now();
  const Scaled s = Scale(problem);
  BranchAndBound bb(s, options, bounds);
  MipSolution sol;
  if (bb.BudgetsReachable()) bb.Run();
  sol.stats = bb.stats();
  sol.stats.lambda_runtime = bb.lambda_runtime();
  sol.stats.lambda_memory = bb.lambda_memory();
  sol.stats.runtime_unit = s.rt_unit;
  const double sign = problem.polarity == Polarity::kCost ? 1.0 : -1.0;
  sol.stats.root_bound = sign * sol.stats.root_bound;
  if (bb.found()) {
    sol.feasible = true;
    sol.choice = bb.best();
    sol.architecture = ChoiceToArchitecture(problem, sol.choice);
    sol.totals = ComputeTotals(problem, sol.choice);
    sol.objective = sol.totals.score;
    sol.proved_optimal = !bb.aborted();
    sol.gap = sol.proved_optimal ? 0.0 : std::abs(sol.objective - sol.stats.root_bound);
  } else {
    sol.infeasibility = Diagnose(problem, s);
    if (bb.aborted()) {
      sol.infeasibility.binding = "node_limit";
      sol.infeasibility.message = "node limit reached before any feasible selection; " +
                                  sol.infeasibility.message;
    } else if (!problem.previous.empty() && sol.infeasibility.binding == "joint") {
      MipProblem relaxed = problem;
      relaxed.previous.clear();
      if (SolveMip(relaxed, options).feasible) {
        sol.infeasibility.binding = "diversity";
        sol.infeasibility.message =
            "diversity cuts (at most " + std::to_string(problem.MaxSharedGroups()) +
            " shared groups) exclude every selection within budget";
      }
    }
  }
  sol.stats.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return sol;
}

MipProblem AddDiversityCut(MipProblem problem, const MipSolution& solution) {
  Require(problem.alpha >= 0.0 && problem.alpha <= 1.0, ErrorCode::kInvalidArgument,
          "alpha must lie in [0, 1]");
  Require(solution.feasible, ErrorCode::kInvalidArgument,
          "cannot add a diversity cut from an infeasible solution");
  problem.previous.push_back(solution.architecture);
  return problem;
}

std::vector<MipSolution> SolveDiverse(const MipProblem& problem, int count,
                                      const SolveOptions& options) {
  Require(count >= 1, ErrorCode::kInvalidArgument, "need at least one solution");
  std::vector<MipSolution> out;
  MipProblem p = problem;
  for (int i = 0; i < count; ++i) {
    MipSolution sol = SolveMip(p, options);
    if (!sol.feasible) {
      if (out.empty()) out.push_back(std::move(sol));
      break;
    }
    p = AddDiversityCut(std::move(p), sol);
    out.push_back(std::move(sol));
  }
  return out;
}

MipProblem BuildProblem(const SearchSpace& space, const ScoreLedger& ledger,
                        const ResourceTable& table, int batch, const Limits& limits,
                        Encoding encoding) {
  ledger.CheckComplete(space);
  table.CheckComplete(space);
  Require(encoding == Encoding::kBlock || ledger.granularity() == ScoreGranularity::kSubblock,
          ErrorCode::kInvalidArgument, "subblock groups need a subblock-level ledger");
  MipProblem p;
  p.num_layers = space.num_layers();
  p.batch_size = batch;
  p.seq_len = table.seq_len();
  p.limits = limits;
  p.polarity = ledger.polarity();
  auto runtime = [&](int l, Subblock s, int i) {
    return table.runtime(l, s, i, batch).runtime.total();
  };
  for (int l = 0; l < space.num_layers(); ++l) {
    const LayerMenu& menu = space.layer(l);
    const int na = static_cast<int>(menu.attention.size());
    const int nf = static_cast<int>(menu.ffn.size());
    auto attention = [&](int j) {
      return MipVariant{j,
                        -1,
                        menu.attention[j].id(),
                        ledger.granularity() == ScoreGranularity::kSubblock
                            ? ledger.Subblock(l, Subblock::kAttention, j)
                            : 0.0,
                        table.mem_params(l, Subblock::kAttention, j),
                        table.mem_kv(l, Subblock::kAttention, j),
                        runtime(l, Subblock::kAttention, j)};
    };
    auto ffn = [&](int k) {
      return MipVariant{-1,
                        k,
                        menu.ffn[k].id(),
                        ledger.granularity() == ScoreGranularity::kSubblock
                            ? ledger.Subblock(l, Subblock::kFfn, k)
                            : 0.0,
                        table.mem_params(l, Subblock::kFfn, k),
                        table.mem_kv(l, Subblock::kFfn, k),
                        runtime(l, Subblock::kFfn, k)};
    };
    if (encoding == Encoding::kBlock) {
      MipGroup g{l, {}};
      for (int j = 0; j < na; ++j) {
        const MipVariant a = attention(j);
        for (int k = 0; k < nf; ++k) {
          const MipVariant f = ffn(k);
          const double score = ledger.granularity() == ScoreGranularity::kBlock
                                   ? ledger.Block(l, j, k)
                                   : a.score + f.score;
          g.variants.push_back({j, k, a.id + "+" + f.id, score, a.mem_params + f.mem_params,
                                a.mem_kv + f.mem_kv, a.runtime + f.runtime});
        }
      }
      p.groups.push_back(std::move(g));
    } else {
      MipGroup ga{l, {}}, gf{l, {}};
      for (int j = 0; j < na; ++j) ga.variants.push_back(attention(j));
      for (int k = 0; k < nf; ++k) gf.variants.push_back(ffn(k));
      p.groups.push_back(std::move(ga));
      p.groups.push_back(std::move(gf));
    }
  }
  p.Validate();
  return p;
}

SweepResult BatchSweep(const std::function<MipProblem(int)>& make_problem,
                       const std::vector<int>& batches, int max_batch,
                       const SolveOptions& options, int workers) {
  Require(!batches.empty(), ErrorCode::kInvalidArgument, "batch set is empty");
  std::vector<int> bs;
  for (int b : batches) {
    Require(b >= 1, ErrorCode::kInvalidArgument, "batch sizes must be >= 1");
    if (max_batch <= 0 || b <= max_batch) bs.push_back(b);
  }
  std::sort(bs.begin(), bs.end());
  bs.erase(std::unique(bs.begin(), bs.end()), bs.end());
  SweepResult out;
  if (bs.empty()) {
    out.message = "every batch size exceeds max_batch " + std::to_string(max_batch);
    return out;
  }
  std::vector<MipProblem> problems;
  for (int b : bs) problems.push_back(make_problem(b));
  out.rows.resize(bs.size());
  ParallelFor(static_cast<int>(bs.size()), workers, [&](int i) {
    out.rows[i] = {bs[i], SolveMip(problems[i], options)};
  });
  const Polarity pol = problems.front().polarity;
  auto better = [&](const MipSolution& a, const MipSolution& b) {
    if (a.objective != b.objective) {
      return pol == Polarity::kCost ? a.objective < b.objective : a.objective > b.objective;
    }
    return a.totals.throughput > b.totals.throughput;
  };
  std::ostringstream msg;
  for (std::size_t i = 0; i < out.rows.size(); ++i) {
    const MipSolution& s = out.rows[i].solution;
    if (!s.feasible) {
      msg << "b=" << out.rows[i].batch << ": " << s.infeasibility.binding << "; ";
      continue;
    }
    if (out.best < 0 || better(s, out.rows[out.best].solution)) out.best = static_cast<int>(i);
  }
  if (out.best < 0) out.message = "all batch sizes infeasible: " + msg.str();
  return out;
}

namespace {

BaselineResult Finish(const MipProblem& p, std::vector<int> choice) {
  BaselineResult r;
  r.feasible = true;
  r.architecture = ChoiceToArchitecture(p, choice);
  r.totals = ComputeTotals(p, choice);
  r.choice = std::move(choice);
  return r;
}

// Equal split with rollover; `prefer(g, a, b)` is true when option a beats
// option b.
BaselineResult SplitBudgetSearch(const MipProblem& p, const Scaled& s,
                                 const std::vector<int>& order,
                                 const std::function<bool(int, int, int)>& prefer) {
  const std::int64_t n = s.groups;
  const std::int64_t mem_share = s.mem_budget == kNoLimit ? kNoLimit : s.mem_budget / n;
  const std::int64_t rt_share = s.rt_budget == kNoLimit ? kNoLimit : s.rt_budget / n;
  std::int64_t mem_carry = 0, rt_carry = 0;
  std::vector<int> choice(s.groups, -1);
  for (int g : order) {
    const std::int64_t mem_cap = mem_share == kNoLimit ? kNoLimit : mem_share + mem_carry;
    const std::int64_t rt_cap = rt_share == kNoLimit ? kNoLimit : rt_share + rt_carry;
    int pick = -1;
    for (int j = 0; j < static_cast<int>(s.cost[g].size()); ++j) {
      if (!Fits(s.mem[g][j], mem_cap) || !Fits(s.rt[g][j], rt_cap)) continue;
      if (pick < 0 || prefer(g, j, pick)) pick = j;
    }
    if (pick < 0) {
      BaselineResult r;
      r.message = "no variant of group " + std::to_string(g) + " (layer " +
                  std::to_string(p.groups[g].layer) + ") fits its budget of " +
                  (mem_cap == kNoLimit ? std::string("unlimited")
                                       : std::to_string(mem_cap / s.mem_unit)) +
                  " bytes and " +
                  (rt_cap == kNoLimit ? std::string("unlimited")
                                      : std::to_string(rt_cap / s.rt_unit)) +
                  " s";
      return r;
    }
    choice[g] = pick;
    if (mem_cap != kNoLimit) mem_carry = mem_cap - s.mem[g][pick];
    if (rt_cap != kNoLimit) rt_carry = rt_cap - s.rt[g][pick];
  }
  return Finish(p, std::move(choice));
}

}  // namespace

BaselineResult GreedySearch(const MipProblem& problem) {
  const Scaled s = Scale(problem);
  std::vector<double> mean(s.groups, 0.0);
  for (int g = 0; g < s.groups; ++g) {
    for (double c : s.cost[g]) mean[g] += c;
    mean[g] /= static_cast<double>(s.cost[g].size());
  }
  std::vector<int> order(s.groups);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return mean[a] < mean[b]; });
  return SplitBudgetSearch(problem, s, order, [&](int g, int a, int b) {
    return s.cost[g][a] < s.cost[g][b];
  });
}

BaselineResult MaxParamsSearch(const MipProblem& problem,
                               const std::vector<std::vector<double>>* params) {
  const Scaled s = Scale(problem);
  std::vector<std::vector<double>> count(s.groups);
  for (int g = 0; g < s.groups; ++g) {
    for (const MipVariant& v : problem.groups[g].variants) count[g].push_back(v.mem_params);
  }
  if (params != nullptr) {
    Require(params->size() == count.size(), ErrorCode::kInvalidArgument,
            "parameter table has the wrong number of groups");
    for (int g = 0; g < s.groups; ++g) {
      Require((*params)[g].size() == count[g].size(), ErrorCode::kInvalidArgument,
              "parameter table has the wrong number of variants");
    }
    count = *params;
  }
  std::vector<int> order(s.groups);
  std::iota(order.begin(), order.end(), 0);
  return SplitBudgetSearch(problem, s, order,
                           [&](int g, int a, int b) { return count[g][a] > count[g][b]; });
}

const char* RandomModeName(RandomMode m) {
  return m == RandomMode::kFromLibrary ? "from_library" : "fully_random";
}

BaselineResult RandomSearch(const MipProblem& problem, RandomMode mode, std::uint64_t seed,
                            int max_attempts) {
  Require(max_attempts >= 1, ErrorCode::kInvalidArgument, "max_attempts must be >= 1");
  const Scaled s = Scale(problem);
  Rng rng(MixSeed(seed, mode == RandomMode::kFromLibrary ? 1 : 2));
  std::vector<int> choice(s.groups);
  for (int attempt = 1; attempt <= max_attempts; ++attempt) {
    std::int64_t m = 0, r = 0;
    for (int g = 0; g < s.groups; ++g) {
      choice[g] = UniformIndex(rng, static_cast<int>(s.cost[g].size()));
      m += s.mem[g][choice[g]];
      r += s.rt[g][choice[g]];
    }
    if (Fits(m, s.mem_budget) && Fits(r, s.rt_budget)) {
      BaselineResult res = Finish(problem, choice);
      res.attempts = attempt;
      res.acceptance_rate = 1.0 / attempt;
      res.fresh_weights = mode == RandomMode::kFullyRandom;
      return res;
    }
  }
  BaselineResult res;
  res.attempts = max_attempts;
  res.message = "no feasible draw in " + std::to_string(max_attempts) +
                " attempts (acceptance rate below " + std::to_string(1.0 / max_attempts) + ")";
  return res;
}

json ProblemFile::ToJson() const {
  return {{"space", space},
          {"ledger", ledger},
          {"resources", resources},
          {"batches", batches},
          {"max_batch", max_batch},
          {"limits", limits.ToJson()},
          {"alpha", alpha},
          {"num_solutions", num_solutions},
          {"encoding", EncodingName(encoding)}};
}

ProblemFile ProblemFile::FromJson(const json& doc) {
  ProblemFile f;
  try {
    f.space = doc.at("space").get<std::string>();
    f.ledger = doc.at("ledger").get<std::string>();
    f.resources = doc.at("resources").get<std::string>();
    f.batches = doc.value("batches", f.batches);
    f.max_batch = doc.value("max_batch", 0);
    if (doc.contains("limits")) f.limits = Limits::FromJson(doc.at("limits"));
    f.alpha = doc.value("alpha", 1.0);
    f.num_solutions = doc.value("num_solutions", 1);
    f.encoding = ParseEncoding(doc.value("encoding", std::string("block")));
  } catch (const json::exception& e) {
    Fail(ErrorCode::kSchema, std::string("problem file: ") + e.what());
  }
  Require(!f.batches.empty() && f.num_solutions >= 1 && f.alpha >= 0 && f.alpha <= 1,
          ErrorCode::kSchema, "problem file: bad batches, num_solutions or alpha");
  return f;
}

}  // namespace puzzle
