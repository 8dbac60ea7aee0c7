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

#include "puzzle/resource_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <optional>
#include <set>
#include <sstream>

#include "puzzle/common.hpp"

namespace puzzle {

using nlohmann::json;

void Scenario::Validate() const {
  Require(batch_size >= 1, ErrorCode::kInvalidArgument, "batch_size must be >= 1");
  Require(prefill_len >= 0 && generation_len >= 0 && seq_len() >= 1,
          ErrorCode::kInvalidArgument, "scenario needs seq_len >= 1");
  Require(bytes_per_element > 0.0, ErrorCode::kInvalidArgument,
          "bytes_per_element must be positive");
}

json Scenario::ToJson() const {
  return {{"batch_size", batch_size},
          {"prefill_len", prefill_len},
          {"generation_len", generation_len},
          {"bytes_per_element", bytes_per_element}};
}

Scenario Scenario::FromJson(const json& doc) {
  Scenario s;
  try {
    s.batch_size = doc.value("batch_size", s.batch_size);
    s.prefill_len = doc.value("prefill_len", s.prefill_len);
    s.generation_len = doc.value("generation_len", s.generation_len);
    s.bytes_per_element = doc.value("bytes_per_element", s.bytes_per_element);
  } catch (const json::exception& e) {
    Fail(ErrorCode::kSchema, std::string("scenario: ") + e.what());
  }
  s.Validate();
  return s;
}

double HardwareProfile::Utilization(double rows) const {
  return std::min(1.0, std::max(min_utilization, rows / saturation_rows));
}

void HardwareProfile::Validate() const {
  Require(flops_per_second > 0 && bytes_per_second > 0 && saturation_rows > 0 &&
              min_utilization > 0 && min_utilization <= 1 && kv_layout_factor > 0 &&
              launch_overhead_seconds >= 0,
          ErrorCode::kInvalidArgument, "hardware profile fields out of range");
}

json HardwareProfile::ToJson() const {
  return {{"flops_per_second", flops_per_second},
          {"bytes_per_second", bytes_per_second},
          {"launch_overhead_seconds", launch_overhead_seconds},
          {"saturation_rows", saturation_rows},
          {"min_utilization", min_utilization},
          {"kv_layout_factor", kv_layout_factor}};
}

HardwareProfile HardwareProfile::FromJson(const json& doc) {
  HardwareProfile h;
  try {
    h.flops_per_second = doc.value("flops_per_second", h.flops_per_second);
    h.bytes_per_second = doc.value("bytes_per_second", h.bytes_per_second);
    h.launch_overhead_seconds =
        doc.value("launch_overhead_seconds", h.launch_overhead_seconds);
    h.saturation_rows = doc.value("saturation_rows", h.saturation_rows);
    h.min_utilization = doc.value("min_utilization", h.min_utilization);
    h.kv_layout_factor = doc.value("kv_layout_factor", h.kv_layout_factor);
  } catch (const json::exception& e) {
    Fail(ErrorCode::kSchema, std::string("hardware profile: ") + e.what());
  }
  h.Validate();
  return h;
}

double KvBytesPerToken(const AttentionVariant& v, double bytes_per_element,
                       double layout_factor) {
  if (v.kind != AttentionKind::kGqa) return 0.0;
  return static_cast<double>(v.kv_heads) * v.head_dim * 2.0 * bytes_per_element *
         layout_factor;
}

double KvCacheBytes(const AttentionVariant& v, const Scenario& scenario,
                    double layout_factor) {
  return scenario.seq_len() * KvBytesPerToken(v, scenario.bytes_per_element, layout_factor);
}

double KvCacheBytesForBatch(double per_token_bytes, int seq_len, int batch) {
  return per_token_bytes * seq_len * batch;
}

long long ParamCount(const AttentionVariant& v, const ParentShape& parent) {
  const long long h = parent.hidden_dim();
  switch (v.kind) {
    case AttentionKind::kGqa: {
      const long long qd = static_cast<long long>(v.query_heads) * v.head_dim;
      const long long kvd = static_cast<long long>(v.kv_heads) * v.head_dim;
      return 2 * h * qd + 2 * h * kvd;
    }
    case AttentionKind::kLinear:
      return h * h;
    case AttentionKind::kNoOp:
      break;
  }
  return 0;
}

long long ParamCount(const FfnVariant& v, const ParentShape& parent) {
  const long long h = parent.hidden_dim();
  switch (v.kind) {
    case FfnKind::kGated:
      return 3 * h * v.IntermediateDim(parent.intermediate_dim);
    case FfnKind::kLinear:
      return h * h;
    case FfnKind::kNoOp:
      break;
  }
  return 0;
}

double ParamBytes(const AttentionVariant& a, const FfnVariant& f,
                  const ParentShape& parent, double bytes_per_element) {
  return static_cast<double>(ParamCount(a, parent) + ParamCount(f, parent)) *
         bytes_per_element;
}

namespace {

struct Work {
  double params = 0.0;          // matmul weights
  double attn_width = 0.0;      // query_heads * head_dim for score FLOPs
  double kv_per_token = 0.0;    // bytes
};

PhaseRuntime Roofline(const Work& w, const Scenario& s, const HardwareProfile& hw) {
  PhaseRuntime r;
  const double b = s.batch_size;
  const double param_bytes = w.params * s.bytes_per_element;
  if (s.prefill_len > 0) {
    const double p = s.prefill_len;
    const double rows = b * p;
    const double flops = 2.0 * w.params * rows + b * 4.0 * w.attn_width * p * (p + 1) / 2.0;
    const double compute = flops / (hw.flops_per_second * hw.Utilization(rows));
    const double io = (param_bytes + rows * w.kv_per_token) / hw.bytes_per_second;
    r.prefill_seconds = std::max(compute, io) + hw.launch_overhead_seconds;
  }
  if (s.generation_len > 0) {
    const double ctx = s.prefill_len + (s.generation_len + 1) / 2.0;
    const double flops = 2.0 * w.params * b + b * 4.0 * w.attn_width * ctx;
    const double compute = flops / (hw.flops_per_second * hw.Utilization(b));
    const double io = (param_bytes + b * ctx * w.kv_per_token) / hw.bytes_per_second;
    r.generation_seconds =
        (std::max(compute, io) + hw.launch_overhead_seconds) * s.generation_len;
  }
  return r;
}

}  // namespace

PhaseRuntime AnalyticRuntime(const AttentionVariant& v, const ParentShape& parent,
                             const Scenario& scenario, const HardwareProfile& hw) {
  scenario.Validate();
  if (v.kind == AttentionKind::kNoOp) return {};
  Work w;
  w.params = static_cast<double>(ParamCount(v, parent));
  if (v.kind == AttentionKind::kGqa) {
    w.attn_width = static_cast<double>(v.query_heads) * v.head_dim;
    w.kv_per_token = KvBytesPerToken(v, scenario.bytes_per_element, hw.kv_layout_factor);
  }
  return Roofline(w, scenario, hw);
}

PhaseRuntime AnalyticRuntime(const FfnVariant& v, const ParentShape& parent,
                             const Scenario& scenario, const HardwareProfile& hw) {
  scenario.Validate();
  if (v.kind == FfnKind::kNoOp) return {};
  Work w;
  w.params = static_cast<double>(ParamCount(v, parent));
  return Roofline(w, scenario, hw);
}

PhaseRuntime AnalyticRuntime(const AttentionVariant& a, const FfnVariant& f,
                             const ParentShape& parent, const Scenario& scenario,
                             const HardwareProfile& hw) {
  const PhaseRuntime x = AnalyticRuntime(a, parent, scenario, hw);
  const PhaseRuntime y = AnalyticRuntime(f, parent, scenario, hw);
  return {x.prefill_seconds + y.prefill_seconds,
          x.generation_seconds + y.generation_seconds};
}

bool operator==(const ResourceEntry& a, const ResourceEntry& b) {
  return a.layer == b.layer && a.subblock == b.subblock && a.index == b.index &&
         a.variant_id == b.variant_id && a.mem_params_bytes == b.mem_params_bytes &&
         a.mem_kv_bytes_per_token == b.mem_kv_bytes_per_token && a.runtime == b.runtime;
}

ResourceTable::ResourceTable(int prefill_len, int generation_len,
                             std::vector<std::vector<ResourceEntry>> attention,
                             std::vector<std::vector<ResourceEntry>> ffn)
    : prefill_len_(prefill_len),
      generation_len_(generation_len),
      attention_(std::move(attention)),
      ffn_(std::move(ffn)) {
  Require(attention_.size() == ffn_.size(), ErrorCode::kShapeMismatch,
          "resource table layer counts differ");
  for (const auto* group : {&attention_, &ffn_}) {
    for (const auto& layer : *group) {
      for (const auto& e : layer) {
        Require(e.mem_params_bytes >= 0 && e.mem_kv_bytes_per_token >= 0,
                ErrorCode::kInvalidArgument, "resource entries must be >= 0");
        Require(!e.runtime.empty(), ErrorCode::kInvalidArgument,
                "resource entry without runtime for " + e.variant_id);
        for (const auto& [b, r] : e.runtime) {
          Require(b >= 1 && r.prefill_seconds >= 0 && r.generation_seconds >= 0,
                  ErrorCode::kInvalidArgument, "runtime entries must be >= 0");
        }
      }
    }
  }
}

const std::vector<ResourceEntry>& ResourceTable::entries(int layer, Subblock s) const {
  Require(layer >= 0 && layer < num_layers(), ErrorCode::kOutOfRange,
          "resource table layer out of range");
  return s == Subblock::kAttention ? attention_[layer] : ffn_[layer];
}

const ResourceEntry& ResourceTable::entry(int layer, Subblock s, int index) const {
  const auto& group = entries(layer, s);
  Require(index >= 0 && index < static_cast<int>(group.size()), ErrorCode::kNotFound,
          "resource table has no entry " + std::to_string(index) + " for layer " +
              std::to_string(layer));
  return group[index];
}

double ResourceTable::mem_params(int layer, Subblock s, int index) const {
  return entry(layer, s, index).mem_params_bytes;
}

double ResourceTable::mem_kv(int layer, Subblock s, int index) const {
  return entry(layer, s, index).mem_kv_bytes_per_token * seq_len();
}

RuntimeQuery ResourceTable::runtime(int layer, Subblock s, int index, int batch) const {
  const auto& rt = entry(layer, s, index).runtime;
  RuntimeQuery q;
  auto hit = rt.find(batch);
  if (hit != rt.end()) {
    q.runtime = hit->second;
    return q;
  }
  if (batch < rt.begin()->first) {
    q.runtime = rt.begin()->second;
    q.clamped = true;
    return q;
  }
  if (batch > rt.rbegin()->first) {
    q.runtime = rt.rbegin()->second;
    q.clamped = true;
    return q;
  }
  auto hi = rt.upper_bound(batch);
  auto lo = std::prev(hi);
  const double t = static_cast<double>(batch - lo->first) / (hi->first - lo->first);
  q.runtime.prefill_seconds =
      lo->second.prefill_seconds + t * (hi->second.prefill_seconds - lo->second.prefill_seconds);
  q.runtime.generation_seconds =
      lo->second.generation_seconds +
      t * (hi->second.generation_seconds - lo->second.generation_seconds);
  q.interpolated = true;
  return q;
}

std::vector<int> ResourceTable::batches() const {
  std::set<int> all;
  for (const auto* group : {&attention_, &ffn_}) {
    for (const auto& layer : *group) {
      for (const auto& e : layer) {
        for (const auto& kv : e.runtime) all.insert(kv.first);
      }
    }
  }
  return {all.begin(), all.end()};
}

void ResourceTable::CheckComplete(const SearchSpace& space) const {
  Require(num_layers() == space.num_layers(), ErrorCode::kSchema,
          "resource table covers " + std::to_string(num_layers()) +
              " layers, space has " + std::to_string(space.num_layers()));
  for (int l = 0; l < space.num_layers(); ++l) {
    const LayerMenu& menu = space.layer(l);
    auto check = [&](Subblock s, std::size_t n, auto id_of) {
      const auto& group = entries(l, s);
      for (std::size_t i = 0; i < n; ++i) {
        Require(i < group.size() && group[i].variant_id == id_of(i), ErrorCode::kSchema,
                "resource table missing (layer " + std::to_string(l) + ", " + id_of(i) +
                    ")");
      }
    };
    check(Subblock::kAttention, menu.attention.size(),
          [&](std::size_t i) { return menu.attention[i].id(); });
    check(Subblock::kFfn, menu.ffn.size(), [&](std::size_t i) { return menu.ffn[i].id(); });
  }
}

bool ResourceTable::operator==(const ResourceTable& o) const {
  return prefill_len_ == o.prefill_len_ && generation_len_ == o.generation_len_ &&
         attention_ == o.attention_ && ffn_ == o.ffn_;
}

namespace {

const char* const kColumns[] = {"layer",           "variant_id",         "batch",
                                "prefill_len",     "generation_len",     "prefill_seconds",
                                "generation_seconds", "mem_params_bytes",
                                "mem_kv_bytes_per_token"};
constexpr int kNumColumns = 9;

std::string Num(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

template <typename Fn>
void ForEachRow(const ResourceTable& t, Fn fn) {
  for (int l = 0; l < t.num_layers(); ++l) {
    for (Subblock s : {Subblock::kAttention, Subblock::kFfn}) {
      for (const auto& e : t.entries(l, s)) {
        for (const auto& [b, r] : e.runtime) fn(e, b, r);
      }
    }
  }
}

}  // namespace

std::string ResourceTable::ToCsv() const {
  std::string out;
  for (int c = 0; c < kNumColumns; ++c) {
    out += kColumns[c];
    out += c + 1 < kNumColumns ? "," : "\n";
  }
  ForEachRow(*this, [&](const ResourceEntry& e, int b, const PhaseRuntime& r) {
    out += std::to_string(e.layer) + "," + e.variant_id + "," + std::to_string(b) + "," +
           std::to_string(prefill_len_) + "," + std::to_string(generation_len_) + "," +
           Num(r.prefill_seconds) + "," + Num(r.generation_seconds) + "," +
           Num(e.mem_params_bytes) + "," + Num(e.mem_kv_bytes_per_token) + "\n";
  });
  return out;
}

json ResourceTable::ToJson() const {
  json rows = json::array();
  ForEachRow(*this, [&](const ResourceEntry& e, int b, const PhaseRuntime& r) {
    rows.push_back({{"layer", e.layer},
                    {"variant_id", e.variant_id},
                    {"batch", b},
                    {"prefill_len", prefill_len_},
                    {"generation_len", generation_len_},
                    {"prefill_seconds", r.prefill_seconds},
                    {"generation_seconds", r.generation_seconds},
                    {"mem_params_bytes", e.mem_params_bytes},
                    {"mem_kv_bytes_per_token", e.mem_kv_bytes_per_token}});
  });
  return rows;
}

std::string ResourceTable::Fingerprint() const { return HexDigest(ToCsv()); }

ResourceTable BuildAnalyticTable(const SearchSpace& space, const Scenario& base,
                                 const std::vector<int>& batches,
                                 const HardwareProfile& hw) {
  base.Validate();
  hw.Validate();
  Require(!batches.empty(), ErrorCode::kInvalidArgument, "no batch sizes requested");
  const ParentShape& p = space.parent();
  std::vector<std::vector<ResourceEntry>> attn(space.num_layers()), ffn(space.num_layers());
  for (int l = 0; l < space.num_layers(); ++l) {
    const LayerMenu& menu = space.layer(l);
    for (int j = 0; j < static_cast<int>(menu.attention.size()); ++j) {
      const AttentionVariant& v = menu.attention[j];
      ResourceEntry e{l, Subblock::kAttention, j, v.id(),
                      static_cast<double>(ParamCount(v, p)) * base.bytes_per_element,
                      KvBytesPerToken(v, base.bytes_per_element, hw.kv_layout_factor),
                      {}};
      for (int b : batches) {
        Scenario s = base;
        s.batch_size = b;
        e.runtime[b] = AnalyticRuntime(v, p, s, hw);
      }
      attn[l].push_back(std::move(e));
    }
    for (int k = 0; k < static_cast<int>(menu.ffn.size()); ++k) {
      const FfnVariant& v = menu.ffn[k];
      ResourceEntry e{l, Subblock::kFfn, k, v.id(),
                      static_cast<double>(ParamCount(v, p)) * base.bytes_per_element, 0.0,
                      {}};
      for (int b : batches) {
        Scenario s = base;
        s.batch_size = b;
        e.runtime[b] = AnalyticRuntime(v, p, s, hw);
      }
      ffn[l].push_back(std::move(e));
    }
  }
  return ResourceTable(base.prefill_len, base.generation_len, std::move(attn),
                       std::move(ffn));
}

namespace {

struct RawRow {
  int line = 0;
  std::map<std::string, std::string> cells;
};

std::string Trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> SplitCsv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(Trim(cell));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::vector<RawRow> ParseCsv(const std::string& text, std::set<std::string>* columns) {
  std::stringstream in(text);
  std::string line;
  std::vector<std::string> header;
  std::vector<RawRow> rows;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    const std::string trimmed = Trim(line);
    if (trimmed.empty() || trimmed[0] == '#') continue;
    auto cells = SplitCsv(line);
    if (header.empty()) {
      header = cells;
      columns->insert(header.begin(), header.end());
      continue;
    }
    Require(cells.size() == header.size(), ErrorCode::kSchema,
            "row " + std::to_string(n) + ": expected " + std::to_string(header.size()) +
                " cells, found " + std::to_string(cells.size()));
    RawRow r;
    r.line = n;
    for (std::size_t c = 0; c < header.size(); ++c) r.cells[header[c]] = cells[c];
    rows.push_back(std::move(r));
  }
  Require(!header.empty(), ErrorCode::kSchema, "measurement file is empty");
  return rows;
}

std::vector<RawRow> ParseJsonRows(const std::string& text, std::set<std::string>* columns) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    Fail(ErrorCode::kSchema, std::string("measurement JSON: ") + e.what());
  }
  Require(doc.is_array(), ErrorCode::kSchema, "measurement JSON must be an array of rows");
  std::vector<RawRow> rows;
  int n = 0;
  for (const json& obj : doc) {
    ++n;
    Require(obj.is_object(), ErrorCode::kSchema,
            "row " + std::to_string(n) + ": not an object");
    RawRow r;
    r.line = n;
    for (const auto& [k, v] : obj.items()) {
      columns->insert(k);
      if (v.is_string()) {
        r.cells[k] = v.get<std::string>();
      } else if (v.is_number_integer()) {
        r.cells[k] = std::to_string(v.get<long long>());
      } else if (v.is_number()) {
        r.cells[k] = Num(v.get<double>());
      } else {
        Fail(ErrorCode::kSchema,
             "row " + std::to_string(n) + ": column " + k + " must be a string or number");
      }
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

double ParseNumber(const RawRow& r, const std::string& col) {
  auto it = r.cells.find(col);
  Require(it != r.cells.end() && !it->second.empty(), ErrorCode::kSchema,
          "row " + std::to_string(r.line) + ": missing " + col);
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(it->second, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  Require(used == it->second.size() && std::isfinite(v), ErrorCode::kSchema,
          "row " + std::to_string(r.line) + ": " + col + " is not a number ('" +
              it->second + "')");
  Require(v >= 0.0, ErrorCode::kSchema,
          "row " + std::to_string(r.line) + ": negative " + col);
  return v;
}

int ParseInt(const RawRow& r, const std::string& col) {
  const double v = ParseNumber(r, col);
  Require(v == std::floor(v) && v <= 1e9, ErrorCode::kSchema,
          "row " + std::to_string(r.line) + ": " + col + " must be an integer");
  return static_cast<int>(v);
}

}  // namespace

ResourceTable IngestMeasurements(const std::string& text, const SearchSpace& space,
                                 IngestReport* report) {
  IngestReport local;
  IngestReport& rep = report != nullptr ? *report : local;
  rep = IngestReport{};
  std::set<std::string> columns;
  const std::string trimmed = Trim(text);
  std::vector<RawRow> rows = (!trimmed.empty() && trimmed.front() == '[')
                                 ? ParseJsonRows(trimmed, &columns)
                                 : ParseCsv(text, &columns);
  for (const char* c : kColumns) {
    Require(columns.count(c) > 0 || rows.empty(), ErrorCode::kSchema,
            std::string("missing column ") + c);
  }
  for (const std::string& c : columns) {
    if (std::find_if(std::begin(kColumns), std::end(kColumns),
                     [&](const char* k) { return c == k; }) == std::end(kColumns)) {
      rep.warnings.push_back("ignoring unknown column '" + c + "'");
    }
  }

  const int layers = space.num_layers();
  std::vector<std::vector<std::optional<ResourceEntry>>> attn(layers), ffn(layers);
  for (int l = 0; l < layers; ++l) {
    attn[l].resize(space.layer(l).attention.size());
    ffn[l].resize(space.layer(l).ffn.size());
  }
  int prefill = -1, generation = -1;
  for (const RawRow& r : rows) {
    const std::string where = "row " + std::to_string(r.line) + ": ";
    const int layer = ParseInt(r, "layer");
    Require(layer < layers, ErrorCode::kSchema, where + "layer out of range");
    const std::string id = r.cells.count("variant_id") ? r.cells.at("variant_id") : "";
    const int batch = ParseInt(r, "batch");
    Require(batch >= 1, ErrorCode::kSchema, where + "batch must be >= 1");
    const int p = ParseInt(r, "prefill_len");
    const int g = ParseInt(r, "generation_len");
    if (prefill < 0) {
      prefill = p;
      generation = g;
    }
    Require(p == prefill && g == generation, ErrorCode::kSchema,
            where + "prefill_len/generation_len differ from earlier rows");
    const PhaseRuntime rt{ParseNumber(r, "prefill_seconds"),
                          ParseNumber(r, "generation_seconds")};
    const double params = ParseNumber(r, "mem_params_bytes");
    const double kv = ParseNumber(r, "mem_kv_bytes_per_token");

    const LayerMenu& menu = space.layer(layer);
    std::optional<ResourceEntry>* slot = nullptr;
    Subblock sub = Subblock::kAttention;
    int index = -1;
    for (int j = 0; j < static_cast<int>(menu.attention.size()); ++j) {
      if (menu.attention[j].id() == id) {
        slot = &attn[layer][j];
        index = j;
      }
    }
    for (int k = 0; k < static_cast<int>(menu.ffn.size()); ++k) {
      if (menu.ffn[k].id() == id) {
        slot = &ffn[layer][k];
        sub = Subblock::kFfn;
        index = k;
      }
    }
    Require(slot != nullptr, ErrorCode::kSchema,
            where + "variant '" + id + "' is not in the menu of layer " +
                std::to_string(layer));
    if (!*slot) {
      *slot = ResourceEntry{layer, sub, index, id, params, kv, {}};
    }
    ResourceEntry& e = **slot;
    Require(e.mem_params_bytes == params && e.mem_kv_bytes_per_token == kv,
            ErrorCode::kSchema, where + "memory columns disagree with earlier rows of " + id);
    Require(e.runtime.count(batch) == 0, ErrorCode::kSchema,
            where + "duplicate batch " + std::to_string(batch) + " for " + id);
    e.runtime[batch] = rt;
  }

  std::set<int> all_batches;
  for (int l = 0; l < layers; ++l) {
    const LayerMenu& menu = space.layer(l);
    for (std::size_t j = 0; j < attn[l].size(); ++j) {
      Require(attn[l][j].has_value(), ErrorCode::kSchema,
              "missing measurements for (layer " + std::to_string(l) + ", " +
                  menu.attention[j].id() + ")");
      for (const auto& kv : attn[l][j]->runtime) all_batches.insert(kv.first);
    }
    for (std::size_t k = 0; k < ffn[l].size(); ++k) {
      Require(ffn[l][k].has_value(), ErrorCode::kSchema,
              "missing measurements for (layer " + std::to_string(l) + ", " +
                  menu.ffn[k].id() + ")");
      for (const auto& kv : ffn[l][k]->runtime) all_batches.insert(kv.first);
    }
  }

  std::vector<std::vector<ResourceEntry>> attn_out(layers), ffn_out(layers);
  for (int l = 0; l < layers; ++l) {
    for (auto& e : attn[l]) attn_out[l].push_back(std::move(*e));
    for (auto& e : ffn[l]) ffn_out[l].push_back(std::move(*e));
  }
  const ResourceTable measured(prefill, generation, attn_out, ffn_out);
  // Complete every entry over the union of measured batch sizes.
  for (int l = 0; l < layers; ++l) {
    for (Subblock s : {Subblock::kAttention, Subblock::kFfn}) {
      auto& group = s == Subblock::kAttention ? attn_out[l] : ffn_out[l];
      for (auto& e : group) {
        for (int b : all_batches) {
          if (e.runtime.count(b)) continue;
          const RuntimeQuery q = measured.runtime(l, s, e.index, b);
          e.runtime[b] = q.runtime;
          ++rep.filled;
          if (q.clamped) {
            ++rep.clamped;
            rep.warnings.push_back("clamped runtime for (layer " + std::to_string(l) +
                                   ", " + e.variant_id + ") at batch " +
                                   std::to_string(b));
          }
        }
      }
    }
  }
  return ResourceTable(prefill, generation, std::move(attn_out), std::move(ffn_out));
}

ResourceTable LoadMeasurements(const std::string& path, const SearchSpace& space,
                               IngestReport* report) {
  std::ifstream in(path);
  Require(in.good(), ErrorCode::kIo, "cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return IngestMeasurements(ss.str(), space, report);
}

void SaveTable(const ResourceTable& table, const std::string& path) {
  std::ofstream out(path);
  Require(out.good(), ErrorCode::kIo, "cannot write " + path);
  const bool csv = path.size() >= 4 && path.substr(path.size() - 4) == ".csv";
  out << (csv ? table.ToCsv() : table.ToJson().dump(2) + "\n");
}

}  // namespace puzzle
