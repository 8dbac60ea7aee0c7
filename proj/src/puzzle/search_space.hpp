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

// Per-layer menus of attention and FFN subblock variants, the architecture
// encoding over them, and cardinality accounting.

#ifndef PUZZLE_SEARCH_SPACE_HPP_
#define PUZZLE_SEARCH_SPACE_HPP_

#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace puzzle {

enum class AttentionKind { kGqa, kLinear, kNoOp };
enum class FfnKind { kGated, kLinear, kNoOp };
enum class Subblock { kAttention, kFfn };

const char* SubblockName(Subblock s);
Subblock ParseSubblock(const std::string& name);

struct AttentionVariant {
  AttentionKind kind = AttentionKind::kNoOp;
  // Head fields are only meaningful for kGqa.
  int kv_heads = 0;
  int query_heads = 0;
  int head_dim = 0;

  static AttentionVariant Gqa(int kv_heads, int query_heads, int head_dim);
  static AttentionVariant Linear();
  static AttentionVariant NoOp();

  // Stable identifier used in ledgers, tables and library manifests,
  // e.g. "attn:gqa4", "attn:linear", "attn:noop".
  std::string id() const;
  bool operator==(const AttentionVariant&) const = default;
};

struct FfnVariant {
  FfnKind kind = FfnKind::kNoOp;
  double intermediate_ratio = 0.0;  // kGated only

  static FfnVariant Gated(double ratio);
  static FfnVariant Linear();
  static FfnVariant NoOp();

  // round(ratio * parent_intermediate); 0 for non-gated kinds.
  int IntermediateDim(int parent_intermediate) const;
  std::string id() const;  // "ffn:r0.500", "ffn:linear", "ffn:noop"
  bool operator==(const FfnVariant&) const = default;
};

// Shape of the parent block every menu is derived from.
struct ParentShape {
  int query_heads = 8;
  int head_dim = 8;
  int kv_heads = 8;
  int intermediate_dim = 256;

  int hidden_dim() const { return query_heads * head_dim; }
  bool operator==(const ParentShape&) const = default;
};

struct LayerMenu {
  std::vector<AttentionVariant> attention;
  std::vector<FfnVariant> ffn;
  bool operator==(const LayerMenu&) const = default;
};

// Menu description used to build uniform spaces and to parse config files.
struct MenuSpec {
  std::vector<int> kv_heads;
  bool attention_linear = true;
  bool attention_no_op = true;
  std::vector<double> ffn_ratios;
  bool ffn_linear = true;
  bool ffn_no_op = true;
};

class SearchSpace {
 public:
  static constexpr int kSchemaVersion = 1;

  SearchSpace(ParentShape parent, std::vector<LayerMenu> layers);

  // Same menu at every layer. Attention order: GQA entries as listed, then
  // linear, then no-op. FFN order: ratios as listed, then linear, no-op.
  static SearchSpace Uniform(int num_layers, const ParentShape& parent,
                             const MenuSpec& menu);
  // 6 attention options (GQA 8/4/2/1, linear, no-op) and 9 FFN options
  // (ratios 1, .87, .75, .5, .25, .2, .1, linear, no-op).
  static SearchSpace Default(int num_layers, const ParentShape& parent);
  static MenuSpec DefaultMenu(const ParentShape& parent);

  static SearchSpace FromJson(const nlohmann::json& doc);
  nlohmann::json ToJson() const;
  static SearchSpace Load(const std::string& path);
  void Save(const std::string& path) const;

  int num_layers() const { return static_cast<int>(layers_.size()); }
  const ParentShape& parent() const { return parent_; }
  const LayerMenu& layer(int i) const;
  int parent_attention_index(int layer) const;
  int parent_ffn_index(int layer) const;
  AttentionVariant parent_attention() const;
  FfnVariant parent_ffn() const;

  bool operator==(const SearchSpace&) const = default;

 private:
  ParentShape parent_;
  std::vector<LayerMenu> layers_;
};

// Cross product for one layer in attention-major order.
std::vector<std::pair<AttentionVariant, FfnVariant>> EnumerateLayerVariants(
    const SearchSpace& space, int layer);

// Sum over layers of log10(|A_i| * |F_i|).
double CardinalityLog10(const SearchSpace& space);

struct LayerChoice {
  int attention = 0;
  int ffn = 0;
  bool operator==(const LayerChoice&) const = default;
  auto operator<=>(const LayerChoice&) const = default;
};

struct Architecture {
  std::vector<LayerChoice> choices;

  static Architecture AllParent(const SearchSpace& space);
  nlohmann::json ToJson() const;
  static Architecture FromJson(const nlohmann::json& doc);
  bool operator==(const Architecture&) const = default;
};

struct ValidityReport {
  bool valid = true;
  int layer = -1;
  std::string reason;
};

// Reports the first violation instead of throwing.
ValidityReport ValidateArchitecture(const SearchSpace& space,
                                    const Architecture& arch);

}  // namespace puzzle

#endif  // PUZZLE_SEARCH_SPACE_HPP_
