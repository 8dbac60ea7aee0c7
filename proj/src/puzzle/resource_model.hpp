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

// Per-subblock resource accounting: parameter memory, KV-cache bytes and
// prefill/generation runtime per batch size. Runtimes come from an analytic
// roofline-style model or from ingested measurement tables.

#ifndef PUZZLE_RESOURCE_MODEL_HPP_
#define PUZZLE_RESOURCE_MODEL_HPP_

#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "puzzle/search_space.hpp"

namespace puzzle {

struct Scenario {
  int batch_size = 1;
  int prefill_len = 64;
  int generation_len = 64;
  double bytes_per_element = 1.0;

  int seq_len() const { return prefill_len + generation_len; }
  void Validate() const;
  nlohmann::json ToJson() const;
  static Scenario FromJson(const nlohmann::json& doc);
  bool operator==(const Scenario&) const = default;
};

struct HardwareProfile {
  double flops_per_second = 2e12;
  double bytes_per_second = 2e11;
  double launch_overhead_seconds = 0.0;
  // Utilization for a kernel over m rows: min(1, max(min_utilization,
  // m / saturation_rows)). Nondecreasing and capped at 1.
  double saturation_rows = 256.0;
  double min_utilization = 0.02;
  double kv_layout_factor = 1.0;

  double Utilization(double rows) const;
  void Validate() const;
  nlohmann::json ToJson() const;
  static HardwareProfile FromJson(const nlohmann::json& doc);
};

// kv_heads * head_dim * 2 (K and V) * bytes_per_element * layout_factor;
// 0 for linear and no-op attention.
double KvBytesPerToken(const AttentionVariant& v, double bytes_per_element,
                       double layout_factor = 1.0);
// Per sequence per layer: seq_len * KvBytesPerToken.
double KvCacheBytes(const AttentionVariant& v, const Scenario& scenario,
                    double layout_factor = 1.0);
// Across the batch: batch * seq_len * per-token bytes.
double KvCacheBytesForBatch(double per_token_bytes, int seq_len, int batch);

// Materialized parameter counts (norm scales excluded).
long long ParamCount(const AttentionVariant& v, const ParentShape& parent);
long long ParamCount(const FfnVariant& v, const ParentShape& parent);
double ParamBytes(const AttentionVariant& a, const FfnVariant& f,
                  const ParentShape& parent, double bytes_per_element);

struct PhaseRuntime {
  double prefill_seconds = 0.0;
  double generation_seconds = 0.0;
  double total() const { return prefill_seconds + generation_seconds; }
  bool operator==(const PhaseRuntime&) const = default;
};

// Per-subblock analytic runtime for `scenario.batch_size` sequences.
// Each phase costs max(compute, IO) + launch overhead; generation is the
// cost of one decode step at the mean context length times generation_len.
// No-op subblocks launch nothing and cost 0.
PhaseRuntime AnalyticRuntime(const AttentionVariant& v, const ParentShape& parent,
                             const Scenario& scenario, const HardwareProfile& hw);
PhaseRuntime AnalyticRuntime(const FfnVariant& v, const ParentShape& parent,
                             const Scenario& scenario, const HardwareProfile& hw);
PhaseRuntime AnalyticRuntime(const AttentionVariant& a, const FfnVariant& f,
                             const ParentShape& parent, const Scenario& scenario,
                             const HardwareProfile& hw);

struct ResourceEntry {
  int layer = 0;
  Subblock subblock = Subblock::kAttention;
  int index = 0;  // menu index
  std::string variant_id;
  double mem_params_bytes = 0.0;
  double mem_kv_bytes_per_token = 0.0;
  std::map<int, PhaseRuntime> runtime;  // by batch size
};

// A runtime query outside the measured batch range is clamped and flagged.
struct RuntimeQuery {
  PhaseRuntime runtime;
  bool clamped = false;
  bool interpolated = false;
};

class ResourceTable {
 public:
  ResourceTable() = default;
  ResourceTable(int prefill_len, int generation_len,
                std::vector<std::vector<ResourceEntry>> attention,
                std::vector<std::vector<ResourceEntry>> ffn);

  int num_layers() const { return static_cast<int>(attention_.size()); }
  int prefill_len() const { return prefill_len_; }
  int generation_len() const { return generation_len_; }
  int seq_len() const { return prefill_len_ + generation_len_; }

  const ResourceEntry& entry(int layer, Subblock s, int index) const;
  const std::vector<ResourceEntry>& entries(int layer, Subblock s) const;

  double mem_params(int layer, Subblock s, int index) const;
  // KV bytes per sequence: per-token bytes * seq_len.
  double mem_kv(int layer, Subblock s, int index) const;
  RuntimeQuery runtime(int layer, Subblock s, int index, int batch) const;
  // All batch sizes present in any entry, ascending.
  std::vector<int> batches() const;

  // Every (layer, variant) of `space` has an entry with a matching id.
  void CheckComplete(const SearchSpace& space) const;

  bool operator==(const ResourceTable&) const;

  // Measurement schema rows.
  std::string ToCsv() const;
  nlohmann::json ToJson() const;
  std::string Fingerprint() const;

 private:
  int prefill_len_ = 0;
  int generation_len_ = 0;
  std::vector<std::vector<ResourceEntry>> attention_;
  std::vector<std::vector<ResourceEntry>> ffn_;
};

bool operator==(const ResourceEntry& a, const ResourceEntry& b);

ResourceTable BuildAnalyticTable(const SearchSpace& space, const Scenario& base,
                                 const std::vector<int>& batches,
                                 const HardwareProfile& hw);

struct IngestReport {
  std::vector<std::string> warnings;  // unknown columns, clamped fills
  int filled = 0;                     // (entry, batch) cells interpolated
  int clamped = 0;                    // of which outside the measured range
};

// Parses the measurement schema (CSV text or a JSON array of row objects)
// against `space`. Missing batch cells are filled by linear interpolation
// over b and clamped outside the measured range. Throws kSchema with
// row-level diagnostics on malformed, negative, or incomplete input.
ResourceTable IngestMeasurements(const std::string& text, const SearchSpace& space,
                                 IngestReport* report = nullptr);
ResourceTable LoadMeasurements(const std::string& path, const SearchSpace& space,
                               IngestReport* report = nullptr);
void SaveTable(const ResourceTable& table, const std::string& path);

}  // namespace puzzle

#endif  // PUZZLE_RESOURCE_MODEL_HPP_
