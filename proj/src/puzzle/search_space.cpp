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

#include "puzzle/search_space.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "puzzle/common.hpp"

namespace puzzle {

using nlohmann::json;

const char* SubblockName(Subblock s) {
  return s == Subblock::kAttention ? "attention" : "ffn";
}

Subblock ParseSubblock(const std::string& name) {
  if (name == "attention") return Subblock::kAttention;
  if (name == "ffn") return Subblock::kFfn;
  Fail(ErrorCode::kSchema, "unknown subblock '" + name + "'");
}

AttentionVariant AttentionVariant::Gqa(int kv_heads, int query_heads,
                                       int head_dim) {
  return {AttentionKind::kGqa, kv_heads, query_heads, head_dim};
}
AttentionVariant AttentionVariant::Linear() { return {AttentionKind::kLinear}; }
AttentionVariant AttentionVariant::NoOp() { return {AttentionKind::kNoOp}; }

std::string AttentionVariant::id() const {
  switch (kind) {
    case AttentionKind::kGqa:
      return "attn:gqa" + std::to_string(kv_heads);
    case AttentionKind::kLinear:
      return "attn:linear";
    case AttentionKind::kNoOp:
      return "attn:noop";
  }
  return "attn:?";
}

FfnVariant FfnVariant::Gated(double ratio) { return {FfnKind::kGated, ratio}; }
FfnVariant FfnVariant::Linear() { return {FfnKind::kLinear, 0.0}; }
FfnVariant FfnVariant::NoOp() { return {FfnKind::kNoOp, 0.0}; }

int FfnVariant::IntermediateDim(int parent_intermediate) const {
  if (kind != FfnKind::kGated) return 0;
  return static_cast<int>(std::lround(intermediate_ratio * parent_intermediate));
}

std::string FfnVariant::id() const {
  switch (kind) {
    case FfnKind::kGated: {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "ffn:r%.3f", intermediate_ratio);
      return buf;
    }
    case FfnKind::kLinear:
      return "ffn:linear";
    case FfnKind::kNoOp:
      return "ffn:noop";
  }
  return "ffn:?";
}

namespace {

void ValidateShape(const ParentShape& p) {
  Require(p.query_heads > 0 && p.head_dim > 0 && p.kv_heads > 0 &&
              p.intermediate_dim > 0,
          ErrorCode::kInvalidArgument, "parent shape fields must be positive");
  Require(p.query_heads % p.kv_heads == 0, ErrorCode::kInvalidArgument,
          "parent kv_heads must divide query_heads");
}

void ValidateMenu(const ParentShape& p, const LayerMenu& menu, int layer) {
  const std::string where = "layer " + std::to_string(layer) + ": ";
  Require(!menu.attention.empty() && !menu.ffn.empty(),
          ErrorCode::kInvalidArgument, where + "empty menu");
  bool has_parent_attn = false;
  for (const auto& a : menu.attention) {
    if (a.kind == AttentionKind::kGqa) {
      Require(a.kv_heads > 0 && a.query_heads == p.query_heads &&
                  a.head_dim == p.head_dim,
              ErrorCode::kInvalidArgument, where + "bad GQA variant " + a.id());
      Require(a.query_heads % a.kv_heads == 0, ErrorCode::kInvalidArgument,
              where + "kv_heads must divide query_heads in " + a.id());
      Require(p.kv_heads % a.kv_heads == 0, ErrorCode::kInvalidArgument,
              where + "kv_heads must divide parent kv_heads in " + a.id());
      if (a.kv_heads == p.kv_heads) has_parent_attn = true;
    } else {
      Require(a.kv_heads == 0 && a.query_heads == 0 && a.head_dim == 0,
              ErrorCode::kInvalidArgument,
              where + "linear/no-op attention carries no head fields");
    }
  }
  bool has_parent_ffn = false;
  for (const auto& f : menu.ffn) {
    if (f.kind == FfnKind::kGated) {
      Require(f.intermediate_ratio > 0.0 && f.intermediate_ratio <= 1.0,
              ErrorCode::kInvalidArgument, where + "ratio outside (0, 1]");
      Require(f.IntermediateDim(p.intermediate_dim) >= 1,
              ErrorCode::kInvalidArgument,
              where + "ratio gives zero intermediate channels: " + f.id());
      if (f.intermediate_ratio == 1.0) has_parent_ffn = true;
    }
  }
  Require(has_parent_attn, ErrorCode::kInvalidArgument,
          where + "parent attention variant missing from menu");
  Require(has_parent_ffn, ErrorCode::kInvalidArgument,
          where + "parent FFN variant missing from menu");
}

LayerMenu BuildMenu(const ParentShape& p, const MenuSpec& spec) {
  LayerMenu menu;
  for (int kv : spec.kv_heads) {
    menu.attention.push_back(
        AttentionVariant::Gqa(kv, p.query_heads, p.head_dim));
  }
  if (spec.attention_linear) menu.attention.push_back(AttentionVariant::Linear());
  if (spec.attention_no_op) menu.attention.push_back(AttentionVariant::NoOp());
  for (double r : spec.ffn_ratios) menu.ffn.push_back(FfnVariant::Gated(r));
  if (spec.ffn_linear) menu.ffn.push_back(FfnVariant::Linear());
  if (spec.ffn_no_op) menu.ffn.push_back(FfnVariant::NoOp());
  return menu;
}

json MenuToJson(const LayerMenu& menu) {
  json attn = {{"kv_heads", json::array()}, {"linear", false}, {"no_op", false}};
  for (const auto& a : menu.attention) {
    if (a.kind == AttentionKind::kGqa) attn["kv_heads"].push_back(a.kv_heads);
    if (a.kind == AttentionKind::kLinear) attn["linear"] = true;
    if (a.kind == AttentionKind::kNoOp) attn["no_op"] = true;
  }
  json ffn = {{"ratios", json::array()}, {"linear", false}, {"no_op", false}};
  for (const auto& f : menu.ffn) {
    if (f.kind == FfnKind::kGated) ffn["ratios"].push_back(f.intermediate_ratio);
    if (f.kind == FfnKind::kLinear) ffn["linear"] = true;
    if (f.kind == FfnKind::kNoOp) ffn["no_op"] = true;
  }
  return {{"attention", attn}, {"ffn", ffn}};
}

MenuSpec MenuFromJson(const json& doc, const MenuSpec& fallback) {
  MenuSpec spec = fallback;
  if (doc.contains("attention")) {
    const json& a = doc.at("attention");
    spec.kv_heads = a.at("kv_heads").get<std::vector<int>>();
    spec.attention_linear = a.value("linear", false);
    spec.attention_no_op = a.value("no_op", false);
  }
  if (doc.contains("ffn")) {
    const json& f = doc.at("ffn");
    spec.ffn_ratios = f.at("ratios").get<std::vector<double>>();
    spec.ffn_linear = f.value("linear", false);
    spec.ffn_no_op = f.value("no_op", false);
  }
  return spec;
}

}  // namespace

SearchSpace::SearchSpace(ParentShape parent, std::vector<LayerMenu> layers)
    : parent_(parent), layers_(std::move(layers)) {
  ValidateShape(parent_);
  Require(!layers_.empty(), ErrorCode::kInvalidArgument,
          "search space needs at least one layer");
  for (int i = 0; i < num_layers(); ++i) ValidateMenu(parent_, layers_[i], i);
}

SearchSpace SearchSpace::Uniform(int num_layers, const ParentShape& parent,
                                 const MenuSpec& menu) {
  Require(num_layers > 0, ErrorCode::kInvalidArgument,
          "num_layers must be positive");
  ValidateShape(parent);
  return SearchSpace(parent, std::vector<LayerMenu>(num_layers,
                                                    BuildMenu(parent, menu)));
}

MenuSpec SearchSpace::DefaultMenu(const ParentShape& parent) {
  MenuSpec spec;
  for (int kv : {8, 4, 2, 1}) {
    if (kv <= parent.kv_heads && parent.kv_heads % kv == 0) {
      spec.kv_heads.push_back(kv);
    }
  }
  if (spec.kv_heads.empty() || spec.kv_heads.front() != parent.kv_heads) {
    spec.kv_heads.insert(spec.kv_heads.begin(), parent.kv_heads);
  }
  spec.ffn_ratios = {1.0, 0.87, 0.75, 0.5, 0.25, 0.2, 0.1};
  return spec;
}

SearchSpace SearchSpace::Default(int num_layers, const ParentShape& parent) {
  return Uniform(num_layers, parent, DefaultMenu(parent));
}

SearchSpace SearchSpace::FromJson(const json& doc) {
  try {
    Require(doc.contains("version"), ErrorCode::kSchema,
            "search space: missing mandatory 'version'");
    const int version = doc.at("version").get<int>();
    Require(version == kSchemaVersion, ErrorCode::kSchema,
            "search space: unsupported version " + std::to_string(version));
    ParentShape parent;
    const json& p = doc.at("parent");
    parent.query_heads = p.at("query_heads").get<int>();
    parent.head_dim = p.at("head_dim").get<int>();
    parent.kv_heads = p.at("kv_heads").get<int>();
    parent.intermediate_dim = p.at("intermediate_dim").get<int>();
    ValidateShape(parent);
    const int num_layers = doc.at("num_layers").get<int>();
    Require(num_layers > 0, ErrorCode::kSchema, "num_layers must be positive");
    const MenuSpec base = MenuFromJson(doc, MenuSpec{});
    std::vector<LayerMenu> layers(num_layers, BuildMenu(parent, base));
    if (doc.contains("layer_overrides")) {
      for (const json& o : doc.at("layer_overrides")) {
        const int layer = o.at("layer").get<int>();
        Require(layer >= 0 && layer < num_layers, ErrorCode::kSchema,
                "layer_overrides: layer out of range");
        layers[layer] = BuildMenu(parent, MenuFromJson(o, base));
      }
    }
    return SearchSpace(parent, std::move(layers));
  } catch (const json::exception& e) {
    Fail(ErrorCode::kSchema, std::string("search space: ") + e.what());
  }
}

json SearchSpace::ToJson() const {
  json doc = MenuToJson(layers_.front());
  doc["version"] = kSchemaVersion;
  doc["num_layers"] = num_layers();
  doc["parent"] = {{"query_heads", parent_.query_heads},
                   {"head_dim", parent_.head_dim},
                   {"kv_heads", parent_.kv_heads},
                   {"intermediate_dim", parent_.intermediate_dim}};
  json overrides = json::array();
  for (int i = 1; i < num_layers(); ++i) {
    if (!(layers_[i] == layers_.front())) {
      json o = MenuToJson(layers_[i]);
      o["layer"] = i;
      overrides.push_back(o);
    }
  }
  if (!overrides.empty()) doc["layer_overrides"] = overrides;
  return doc;
}

SearchSpace SearchSpace::Load(const std::string& path) {
  std::ifstream in(path);
  Require(in.good(), ErrorCode::kIo, "cannot open " + path);
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    Fail(ErrorCode::kSchema, path + ": " + e.what());
  }
  return FromJson(doc);
}

void SearchSpace::Save(const std::string& path) const {
  std::ofstream out(path);
  Require(out.good(), ErrorCode::kIo, "cannot write " + path);
  out << ToJson().dump(2) << "\n";
}

const LayerMenu& SearchSpace::layer(int i) const {
  Require(i >= 0 && i < num_layers(), ErrorCode::kOutOfRange,
          "layer index " + std::to_string(i) + " out of range");
  return layers_[i];
}

int SearchSpace::parent_attention_index(int layer_index) const {
  const auto& menu = layer(layer_index).attention;
  for (int j = 0; j < static_cast<int>(menu.size()); ++j) {
    if (menu[j] == parent_attention()) return j;
  }
  Fail(ErrorCode::kInternal, "parent attention missing");
}

int SearchSpace::parent_ffn_index(int layer_index) const {
  const auto& menu = layer(layer_index).ffn;
  for (int k = 0; k < static_cast<int>(menu.size()); ++k) {
    if (menu[k] == parent_ffn()) return k;
  }
  Fail(ErrorCode::kInternal, "parent FFN missing");
}

AttentionVariant SearchSpace::parent_attention() const {
  return AttentionVariant::Gqa(parent_.kv_heads, parent_.query_heads,
                               parent_.head_dim);
}

FfnVariant SearchSpace::parent_ffn() const { return FfnVariant::Gated(1.0); }

std::vector<std::pair<AttentionVariant, FfnVariant>> EnumerateLayerVariants(
    const SearchSpace& space, int layer) {
  const LayerMenu& menu = space.layer(layer);
  std::vector<std::pair<AttentionVariant, FfnVariant>> out;
  out.reserve(menu.attention.size() * menu.ffn.size());
  for (const auto& a : menu.attention) {
    for (const auto& f : menu.ffn) out.emplace_back(a, f);
  }
  return out;
}

double CardinalityLog10(const SearchSpace& space) {
  double total = 0.0;
  for (int i = 0; i < space.num_layers(); ++i) {
    const LayerMenu& menu = space.layer(i);
    total += std::log10(static_cast<double>(menu.attention.size()) *
                        static_cast<double>(menu.ffn.size()));
  }
  return total;
}

Architecture Architecture::AllParent(const SearchSpace& space) {
  Architecture arch;
  for (int i = 0; i < space.num_layers(); ++i) {
    arch.choices.push_back(
        {space.parent_attention_index(i), space.parent_ffn_index(i)});
  }
  return arch;
}

json Architecture::ToJson() const {
  json layers = json::array();
  for (const auto& c : choices) {
    if (c.attention < 0 || c.ffn < 0) {
      layers.push_back(nullptr);
    } else {
      layers.push_back({c.attention, c.ffn});
    }
  }
  return layers;
}

Architecture Architecture::FromJson(const json& doc) {
  Architecture arch;
  try {
    for (const json& entry : doc) {
      if (entry.is_null()) {
        arch.choices.push_back({-1, -1});
      } else {
        arch.choices.push_back({entry.at(0).get<int>(), entry.at(1).get<int>()});
      }
    }
  } catch (const json::exception& e) {
    Fail(ErrorCode::kSchema, std::string("architecture: ") + e.what());
  }
  return arch;
}

ValidityReport ValidateArchitecture(const SearchSpace& space,
                                    const Architecture& arch) {
  const int n = space.num_layers();
  for (int i = 0; i < n; ++i) {
    if (i >= static_cast<int>(arch.choices.size())) {
      return {false, i, "missing choice"};
    }
    const LayerChoice& c = arch.choices[i];
    if (c.attention < 0 || c.ffn < 0) return {false, i, "missing choice"};
    const LayerMenu& menu = space.layer(i);
    if (c.attention >= static_cast<int>(menu.attention.size()) ||
        c.ffn >= static_cast<int>(menu.ffn.size())) {
      return {false, i, "index out of range"};
    }
  }
  if (static_cast<int>(arch.choices.size()) > n) {
    return {false, n, "extra choice beyond last layer"};
  }
  return {};
}

}  // namespace puzzle
