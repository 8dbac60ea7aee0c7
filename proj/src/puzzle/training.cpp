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

#include "puzzle/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "puzzle/block_init.hpp"
#include "puzzle/tensor_io.hpp"

namespace puzzle {

using nlohmann::json;
namespace fs = std::filesystem;

void Adam::Step(const std::vector<NamedParam>& params,
                const std::vector<NamedParam>& grads) {
  Require(params.size() == grads.size(), ErrorCode::kShapeMismatch,
          "Adam: parameter and gradient lists differ");
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.push_back(Matrix::Zero(p.value->rows(), p.value->cols()));
      v_.push_back(Matrix::Zero(p.value->rows(), p.value->cols()));
    }
  }
  Require(m_.size() == params.size(), ErrorCode::kShapeMismatch,
          "Adam: parameter list changed between steps");
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, t_);
  const double c2 = 1.0 - std::pow(config_.beta2, t_);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& w = *params[i].value;
    const Matrix& g = *grads[i].value;
    Require(w.rows() == g.rows() && w.cols() == g.cols() && w.rows() == m_[i].rows() &&
                w.cols() == m_[i].cols(),
            ErrorCode::kShapeMismatch, "Adam: shape mismatch for " + params[i].name);
    m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * g;
    v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * g.cwiseAbs2();
    w.array() -= config_.lr * (m_[i].array() / c1) /
                 ((v_[i].array() / c2).sqrt() + config_.eps);
  }
}

ToyTransformer TrainParent(const ModelConfig& config, const Corpus& train,
                           const ParentTrainConfig& options,
                           std::vector<double>* losses) {
  Require(!train.empty(), ErrorCode::kInvalidArgument, "empty training corpus");
  Require(options.batch_size >= 1, ErrorCode::kInvalidArgument, "batch_size < 1");
  ToyTransformer model = ToyTransformer::Random(config, options.seed);
  ToyTransformer grad = model.ZerosLike();
  Adam adam({options.lr});
  Rng rng(MixSeed(options.seed, 0x5041));
  ModelCache cache;
  if (losses != nullptr) losses->clear();
  for (int step = 0; step < options.steps; ++step) {
    for (auto& p : grad.Params()) p.value->setZero();
    double total = 0.0;
    for (int b = 0; b < options.batch_size; ++b) {
      const Sequence& seq = train[UniformIndex(rng, static_cast<int>(train.size()))];
      ForwardWithCache(model, seq, &cache);
      OutputGrads up;
      total += LmLoss(cache.trace.logits, NextTokenTargets(seq), &up.d_logits);
      up.d_logits /= options.batch_size;
      Backward(model, cache, up, &grad);
    }
    adam.Step(model.Params(), grad.Params());
    if (losses != nullptr) losses->push_back(total / options.batch_size);
  }
  return model;
}

double CorpusLmLoss(const ToyTransformer& model, const Corpus& corpus) {
  Require(!corpus.empty(), ErrorCode::kInvalidArgument, "empty corpus");
  double total = 0.0;
  for (const Sequence& seq : corpus) {
    total += LmLoss(Forward(model, seq).logits, NextTokenTargets(seq));
  }
  return total / static_cast<double>(corpus.size());
}

const char* BldModeName(BldMode mode) {
  return mode == BldMode::kDecoupled ? "decoupled" : "coupled";
}

BldMode ParseBldMode(const std::string& name) {
  if (name == "decoupled") return BldMode::kDecoupled;
  if (name == "coupled") return BldMode::kCoupled;
  Fail(ErrorCode::kInvalidArgument, "unknown BLD mode '" + name + "'");
}

const char* JobTargetName(JobTarget target) {
  switch (target) {
    case JobTarget::kAttention:
      return "attention";
    case JobTarget::kFfn:
      return "ffn";
    case JobTarget::kBoth:
      return "both";
  }
  return "?";
}

namespace {

JobTarget ParseJobTarget(const std::string& name) {
  if (name == "attention") return JobTarget::kAttention;
  if (name == "ffn") return JobTarget::kFfn;
  if (name == "both") return JobTarget::kBoth;
  Fail(ErrorCode::kSchema, "unknown job target '" + name + "'");
}

bool TrainableAttention(const SearchSpace& space, int layer, int j) {
  return space.layer(layer).attention[j].kind != AttentionKind::kNoOp &&
         j != space.parent_attention_index(layer);
}

bool TrainableFfn(const SearchSpace& space, int layer, int k) {
  return space.layer(layer).ffn[k].kind != FfnKind::kNoOp &&
         k != space.parent_ffn_index(layer);
}

std::vector<NamedParam> TrainableParams(Block& b, JobTarget target) {
  switch (target) {
    case JobTarget::kAttention:
      return SubblockParams(b.attention, "attn.");
    case JobTarget::kFfn:
      return SubblockParams(b.ffn, "ffn.");
    case JobTarget::kBoth:
      break;
  }
  return BlockParams(b, "");
}

}  // namespace

const char* ProvenanceName(Provenance p) {
  switch (p) {
    case Provenance::kParent:
      return "parent";
    case Provenance::kNoOp:
      return "no-op";
    case Provenance::kInitOnly:
      return "init-only";
    case Provenance::kDecoupledBld:
      return "decoupled-bld";
    case Provenance::kCoupledBld:
      return "coupled-bld";
  }
  return "?";
}

Provenance ParseProvenance(const std::string& name) {
  for (Provenance p : {Provenance::kParent, Provenance::kNoOp, Provenance::kInitOnly,
                       Provenance::kDecoupledBld, Provenance::kCoupledBld}) {
    if (name == ProvenanceName(p)) return p;
  }
  Fail(ErrorCode::kSchema, "unknown provenance '" + name + "'");
}

std::string BldJob::id(const SearchSpace& space) const {
  std::string s = "L" + std::to_string(layer) + "/";
  const LayerMenu& menu = space.layer(layer);
  if (attention >= 0) s += menu.attention[attention].id();
  if (attention >= 0 && ffn >= 0) s += "+";
  if (ffn >= 0) s += menu.ffn[ffn].id();
  return s;
}

BldPlan PlanBld(const SearchSpace& space, BldMode mode, const BldBudget& budget,
                std::uint64_t seed) {
  Require(budget.steps >= 0 && budget.lr > 0.0, ErrorCode::kInvalidArgument,
          "BLD budget needs steps >= 0 and lr > 0");
  BldPlan plan;
  plan.mode = mode;
  plan.budget = budget;
  auto add = [&](int layer, JobTarget target, int a, int f) {
    BldJob job;
    job.layer = layer;
    job.target = target;
    job.attention = a;
    job.ffn = f;
    job.mode = mode;
    job.steps = budget.steps;
    job.lr = budget.lr;
    Fnv1a h;
    h.Update(job.id(space));
    job.seed = MixSeed(seed, h.digest());
    plan.jobs.push_back(job);
    (target == JobTarget::kBoth ? plan.pair_jobs : plan.subblock_jobs) += 1;
  };
  for (int l = 0; l < space.num_layers(); ++l) {
    const LayerMenu& menu = space.layer(l);
    const int na = static_cast<int>(menu.attention.size());
    const int nf = static_cast<int>(menu.ffn.size());
    for (int j = 0; j < na; ++j) {
      if (TrainableAttention(space, l, j)) add(l, JobTarget::kAttention, j, -1);
    }
    for (int k = 0; k < nf; ++k) {
      if (TrainableFfn(space, l, k)) add(l, JobTarget::kFfn, -1, k);
    }
    if (mode == BldMode::kCoupled) {
      for (int j = 0; j < na; ++j) {
        if (!TrainableAttention(space, l, j)) continue;
        for (int k = 0; k < nf; ++k) {
          if (TrainableFfn(space, l, k)) add(l, JobTarget::kBoth, j, k);
        }
      }
    }
  }
  return plan;
}

BlockLibrary::BlockLibrary(SearchSpace space, ModelConfig config)
    : space_(std::move(space)), config_(config) {
  Require(space_->parent() == config_.parent_shape(), ErrorCode::kShapeMismatch,
          "search space parent shape does not match model config");
  Require(space_->num_layers() == config_.num_layers, ErrorCode::kShapeMismatch,
          "search space and model config layer counts differ");
  for (int l = 0; l < space_->num_layers(); ++l) {
    attention_.emplace_back(space_->layer(l).attention.size());
    ffn_.emplace_back(space_->layer(l).ffn.size());
  }
}

AttentionBlock& BlockLibrary::attention(int layer, int j) {
  return const_cast<AttentionBlock&>(std::as_const(*this).attention(layer, j));
}

const AttentionBlock& BlockLibrary::attention(int layer, int j) const {
  Require(HasAttention(layer, j), ErrorCode::kNotFound,
          "library has no attention variant " + std::to_string(j) + " at layer " +
              std::to_string(layer));
  return *attention_[layer][j];
}

FfnBlock& BlockLibrary::ffn(int layer, int k) {
  return const_cast<FfnBlock&>(std::as_const(*this).ffn(layer, k));
}

const FfnBlock& BlockLibrary::ffn(int layer, int k) const {
  Require(HasFfn(layer, k), ErrorCode::kNotFound,
          "library has no FFN variant " + std::to_string(k) + " at layer " +
              std::to_string(layer));
  return *ffn_[layer][k];
}

bool BlockLibrary::HasAttention(int layer, int j) const {
  return layer >= 0 && layer < static_cast<int>(attention_.size()) && j >= 0 &&
         j < static_cast<int>(attention_[layer].size()) &&
         attention_[layer][j].has_value();
}

bool BlockLibrary::HasFfn(int layer, int k) const {
  return layer >= 0 && layer < static_cast<int>(ffn_.size()) && k >= 0 &&
         k < static_cast<int>(ffn_[layer].size()) && ffn_[layer][k].has_value();
}

void BlockLibrary::SetAttention(int layer, int j, AttentionBlock block) {
  Require(layer >= 0 && layer < static_cast<int>(attention_.size()) && j >= 0 &&
              j < static_cast<int>(attention_[layer].size()),
          ErrorCode::kOutOfRange, "attention slot out of range");
  attention_[layer][j] = std::move(block);
}

void BlockLibrary::SetFfn(int layer, int k, FfnBlock block) {
  Require(layer >= 0 && layer < static_cast<int>(ffn_.size()) && k >= 0 &&
              k < static_cast<int>(ffn_[layer].size()),
          ErrorCode::kOutOfRange, "FFN slot out of range");
  ffn_[layer][k] = std::move(block);
}

void BlockLibrary::SetPair(int layer, int j, int k, Block block) {
  pairs_[{layer, j, k}] = std::move(block);
}

const Block* BlockLibrary::Pair(int layer, int j, int k) const {
  auto it = pairs_.find({layer, j, k});
  return it == pairs_.end() ? nullptr : &it->second;
}

Block BlockLibrary::Compose(int layer, int j, int k) const {
  if (const Block* p = Pair(layer, j, k)) return *p;
  return {attention(layer, j), ffn(layer, k)};
}

ToyTransformer BlockLibrary::Assemble(const ToyTransformer& parent,
                                      const Architecture& arch) const {
  const ValidityReport report = ValidateArchitecture(space(), arch);
  Require(report.valid, ErrorCode::kInvalidArgument,
          "invalid architecture at layer " + std::to_string(report.layer) + ": " +
              report.reason);
  Require(parent.config() == config_, ErrorCode::kShapeMismatch,
          "parent config does not match library");
  ToyTransformer child = parent;
  for (int l = 0; l < child.num_layers(); ++l) {
    child.layer(l) = Compose(l, arch.choices[l].attention, arch.choices[l].ffn);
  }
  return child;
}

namespace {

TensorMap AttentionTensors(const AttentionBlock& a, const std::string& prefix) {
  TensorMap out;
  AttentionBlock copy = a;
  for (auto& p : SubblockParams(copy, prefix)) out.emplace(p.name, *p.value);
  return out;
}

TensorMap FfnTensors(const FfnBlock& f, const std::string& prefix) {
  TensorMap out;
  FfnBlock copy = f;
  for (auto& p : SubblockParams(copy, prefix)) out.emplace(p.name, *p.value);
  return out;
}

Matrix Take(const TensorMap& t, const std::string& name) {
  auto it = t.find(name);
  Require(it != t.end(), ErrorCode::kSchema, "missing tensor " + name);
  return it->second;
}

AttentionBlock AttentionFromTensors(const AttentionVariant& v, const TensorMap& t,
                                    const std::string& prefix) {
  AttentionBlock a;
  a.kind = v.kind;
  if (v.kind == AttentionKind::kNoOp) return a;
  a.norm = Take(t, prefix + "norm");
  if (v.kind == AttentionKind::kLinear) {
    a.linear = Take(t, prefix + "linear");
  } else {
    a.gqa.w_q = Take(t, prefix + "wq");
    a.gqa.w_k = Take(t, prefix + "wk");
    a.gqa.w_v = Take(t, prefix + "wv");
    a.gqa.w_o = Take(t, prefix + "wo");
    a.gqa.query_heads = v.query_heads;
    a.gqa.kv_heads = v.kv_heads;
    a.gqa.head_dim = v.head_dim;
    a.gqa.CheckShapes();
  }
  return a;
}

FfnBlock FfnFromTensors(const FfnVariant& v, const TensorMap& t,
                        const std::string& prefix) {
  FfnBlock f;
  f.kind = v.kind;
  if (v.kind == FfnKind::kNoOp) return f;
  f.norm = Take(t, prefix + "norm");
  if (v.kind == FfnKind::kLinear) {
    f.linear = Take(t, prefix + "linear");
  } else {
    f.gated.w_up = Take(t, prefix + "up");
    f.gated.w_gate = Take(t, prefix + "gate");
    f.gated.w_down = Take(t, prefix + "down");
    f.gated.CheckShapes();
  }
  return f;
}

std::string EntryFile(const LibraryRecord& r) {
  const std::string l = "L" + std::to_string(r.layer);
  switch (r.target) {
    case JobTarget::kAttention:
      return l + "_attn" + std::to_string(r.attention) + ".pzt";
    case JobTarget::kFfn:
      return l + "_ffn" + std::to_string(r.ffn) + ".pzt";
    case JobTarget::kBoth:
      break;
  }
  return l + "_pair" + std::to_string(r.attention) + "_" + std::to_string(r.ffn) +
         ".pzt";
}

json RecordToJson(const LibraryRecord& r) {
  return {{"layer", r.layer},
          {"target", JobTargetName(r.target)},
          {"attention", r.attention},
          {"ffn", r.ffn},
          {"variant_id", r.variant_id},
          {"provenance", ProvenanceName(r.provenance)},
          {"seed", r.seed},
          {"steps", r.steps},
          {"init_loss", r.init_loss},
          {"final_loss", r.final_loss},
          {"diverged", r.diverged},
          {"file", EntryFile(r)}};
}

LibraryRecord RecordFromJson(const json& j) {
  LibraryRecord r;
  r.layer = j.at("layer").get<int>();
  r.target = ParseJobTarget(j.at("target").get<std::string>());
  r.attention = j.at("attention").get<int>();
  r.ffn = j.at("ffn").get<int>();
  r.variant_id = j.at("variant_id").get<std::string>();
  r.provenance = ParseProvenance(j.at("provenance").get<std::string>());
  r.seed = j.at("seed").get<std::uint64_t>();
  r.steps = j.at("steps").get<int>();
  r.init_loss = j.at("init_loss").get<double>();
  r.final_loss = j.at("final_loss").get<double>();
  r.diverged = j.at("diverged").get<bool>();
  return r;
}

json ManifestJson(const BlockLibrary& lib) {
  json records = json::array();
  for (const auto& r : lib.records()) records.push_back(RecordToJson(r));
  return {{"format", "puzzle-library"},
          {"version", 1},
          {"mode", BldModeName(lib.mode())},
          {"model_config", lib.config().ToJson()},
          {"space", lib.space().ToJson()},
          {"metadata", lib.metadata()},
          {"entries", records}};
}

TensorMap EntryTensors(const BlockLibrary& lib, const LibraryRecord& r) {
  switch (r.target) {
    case JobTarget::kAttention:
      return AttentionTensors(lib.attention(r.layer, r.attention), "");
    case JobTarget::kFfn:
      return FfnTensors(lib.ffn(r.layer, r.ffn), "");
    case JobTarget::kBoth:
      break;
  }
  const Block* b = lib.Pair(r.layer, r.attention, r.ffn);
  Require(b != nullptr, ErrorCode::kInternal, "record without pair weights");
  TensorMap t = AttentionTensors(b->attention, "attn.");
  t.merge(FfnTensors(b->ffn, "ffn."));
  return t;
}

LibraryRecord* FindRecord(std::vector<LibraryRecord>& records, int layer,
                          JobTarget target, int a, int f) {
  for (auto& r : records) {
    if (r.layer == layer && r.target == target && r.attention == a && r.ffn == f) {
      return &r;
    }
  }
  return nullptr;
}

}  // namespace

void BlockLibrary::Save(const std::string& dir) const {
  fs::create_directories(dir);
  for (const auto& r : records_) {
    json meta = {{"kind", "library_entry"},
                 {"layer", r.layer},
                 {"target", JobTargetName(r.target)},
                 {"variant_id", r.variant_id}};
    WriteTensorFile((fs::path(dir) / EntryFile(r)).string(), EntryTensors(*this, r),
                    meta);
  }
  std::ofstream out(fs::path(dir) / "library.json");
  Require(out.good(), ErrorCode::kIo, "cannot write library manifest in " + dir);
  out << ManifestJson(*this).dump(2) << "\n";
}

BlockLibrary BlockLibrary::Load(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "library.json");
  Require(in.good(), ErrorCode::kIo, "cannot open library manifest in " + dir);
  try {
    const json doc = json::parse(in);
    Require(doc.value("format", "") == "puzzle-library" && doc.value("version", 0) == 1,
            ErrorCode::kSchema, "not a version-1 block library");
    BlockLibrary lib(SearchSpace::FromJson(doc.at("space")),
                     ModelConfig::FromJson(doc.at("model_config")));
    lib.mode_ = ParseBldMode(doc.at("mode").get<std::string>());
    lib.metadata_ = doc.at("metadata");
    for (const json& e : doc.at("entries")) {
      LibraryRecord r = RecordFromJson(e);
      Require(r.layer >= 0 && r.layer < lib.space().num_layers(), ErrorCode::kSchema,
              "library entry layer out of range");
      const LayerMenu& menu = lib.space().layer(r.layer);
      const TensorMap t =
          ReadTensorFile((fs::path(dir) / e.at("file").get<std::string>()).string())
              .tensors;
      auto attn_variant = [&](int j) {
        Require(j >= 0 && j < static_cast<int>(menu.attention.size()),
                ErrorCode::kSchema, "library entry attention index out of range");
        return menu.attention[j];
      };
      auto ffn_variant = [&](int k) {
        Require(k >= 0 && k < static_cast<int>(menu.ffn.size()), ErrorCode::kSchema,
                "library entry FFN index out of range");
        return menu.ffn[k];
      };
      if (r.target == JobTarget::kAttention) {
        lib.attention_[r.layer][r.attention] =
            AttentionFromTensors(attn_variant(r.attention), t, "");
      } else if (r.target == JobTarget::kFfn) {
        lib.ffn_[r.layer][r.ffn] = FfnFromTensors(ffn_variant(r.ffn), t, "");
      } else {
        lib.SetPair(r.layer, r.attention, r.ffn,
                    {AttentionFromTensors(attn_variant(r.attention), t, "attn."),
                     FfnFromTensors(ffn_variant(r.ffn), t, "ffn.")});
      }
      lib.records_.push_back(r);
    }
    return lib;
  } catch (const json::exception& e) {
    Fail(ErrorCode::kSchema, std::string("library manifest: ") + e.what());
  }
}

std::string BlockLibrary::Fingerprint() const {
  Fnv1a h;
  h.Update(ManifestJson(*this).dump());
  for (const auto& r : records_) {
    for (const auto& [name, m] : EntryTensors(*this, r)) {
      h.Update(name);
      h.Update(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
    }
  }
  return h.hex();
}

Matrix CalibrationActivations(const ToyTransformer& parent, int layer,
                              const Corpus& corpus, int max_tokens) {
  Require(layer >= 0 && layer < parent.num_layers(), ErrorCode::kOutOfRange,
          "layer index out of range");
  Require(parent.layer(layer).ffn.kind == FfnKind::kGated, ErrorCode::kInvalidArgument,
          "calibration needs a gated parent FFN");
  const Eigen::Index width = parent.layer(layer).ffn.gated.intermediate_dim();
  std::vector<Matrix> parts;
  int taken = 0;
  for (const Sequence& seq : corpus) {
    if (taken >= max_tokens) break;
    const Matrix x = ParentInputAt(parent, seq, layer);
    BlockCache cache;
    BlockForward(parent.layer(layer), x, &cache);
    const int rows = std::min<int>(static_cast<int>(cache.ffn.act.rows()),
                                   max_tokens - taken);
    parts.push_back(cache.ffn.act.topRows(rows));
    taken += rows;
  }
  Matrix out(taken, width);
  Eigen::Index row = 0;
  for (const Matrix& p : parts) {
    out.middleRows(row, p.rows()) = p;
    row += p.rows();
  }
  return out;
}

BlockLibrary BuildInitLibrary(const ToyTransformer& parent, const SearchSpace& space,
                              const Corpus& calibration, int max_tokens) {
  BlockLibrary lib(space, parent.config());
  for (int l = 0; l < space.num_layers(); ++l) {
    const Block& pb = parent.layer(l);
    Require(pb.attention.kind == AttentionKind::kGqa && pb.ffn.kind == FfnKind::kGated,
            ErrorCode::kInvalidArgument, "parent layers must be GQA + gated FFN");
    const LayerMenu& menu = space.layer(l);
    for (int j = 0; j < static_cast<int>(menu.attention.size()); ++j) {
      const AttentionVariant& v = menu.attention[j];
      LibraryRecord r;
      r.layer = l;
      r.target = JobTarget::kAttention;
      r.attention = j;
      r.variant_id = v.id();
      r.provenance = Provenance::kInitOnly;
      AttentionBlock a;
      if (j == space.parent_attention_index(l)) {
        a = pb.attention;
        r.provenance = Provenance::kParent;
      } else if (v.kind == AttentionKind::kNoOp) {
        r.provenance = Provenance::kNoOp;
      } else if (v.kind == AttentionKind::kLinear) {
        a.kind = AttentionKind::kLinear;
        a.linear = AttentionToLinear(pb.attention.gqa);
        a.norm = pb.attention.norm;
      } else {
        a.kind = AttentionKind::kGqa;
        a.gqa = MeanPoolKv(pb.attention.gqa, v.kv_heads);
        a.norm = pb.attention.norm;
      }
      lib.SetAttention(l, j, std::move(a));
      lib.records().push_back(r);
    }
    std::optional<ChannelRanking> ranking;
    for (int k = 0; k < static_cast<int>(menu.ffn.size()); ++k) {
      const FfnVariant& v = menu.ffn[k];
      LibraryRecord r;
      r.layer = l;
      r.target = JobTarget::kFfn;
      r.ffn = k;
      r.variant_id = v.id();
      r.provenance = Provenance::kInitOnly;
      FfnBlock f;
      if (k == space.parent_ffn_index(l)) {
        f = pb.ffn;
        r.provenance = Provenance::kParent;
      } else if (v.kind == FfnKind::kNoOp) {
        r.provenance = Provenance::kNoOp;
      } else if (v.kind == FfnKind::kLinear) {
        f.kind = FfnKind::kLinear;
        f.linear = FfnToLinear(pb.ffn.gated);
        f.norm = pb.ffn.norm;
      } else {
        if (!ranking) {
          ranking = ChannelContribution(
              pb.ffn.gated, CalibrationActivations(parent, l, calibration, max_tokens));
        }
        f.kind = FfnKind::kGated;
        f.gated = PruneFfn(pb.ffn.gated, *ranking, v.intermediate_ratio);
        f.norm = pb.ffn.norm;
      }
      lib.SetFfn(l, k, std::move(f));
      lib.records().push_back(r);
    }
  }
  lib.metadata()["calibration_tokens"] = max_tokens;
  lib.metadata()["calibration_fingerprint"] = CorpusFingerprint(calibration);
  return lib;
}

ParentActivations ParentActivations::Compute(const ToyTransformer& parent,
                                             const Corpus& corpus) {
  ParentActivations acts;
  acts.inputs.resize(parent.num_layers() + 1);
  for (const Sequence& seq : corpus) {
    Matrix x = ParentInputAt(parent, seq, 0);
    for (int l = 0; l < parent.num_layers(); ++l) {
      acts.inputs[l].push_back(x);
      x = BlockForward(parent.layer(l), x, nullptr);
    }
    acts.inputs[parent.num_layers()].push_back(std::move(x));
  }
  return acts;
}

double HeldOutBldLoss(const Block& child, int layer, const ParentActivations& acts) {
  Require(layer >= 0 && layer + 1 < static_cast<int>(acts.inputs.size()),
          ErrorCode::kOutOfRange, "layer index out of range");
  const auto& xs = acts.inputs[layer];
  Require(!xs.empty(), ErrorCode::kInvalidArgument, "empty held-out set");
  double total = 0.0;
  for (std::size_t s = 0; s < xs.size(); ++s) {
    total += BldLoss(acts.inputs[layer + 1][s], BlockForward(child, xs[s], nullptr));
  }
  return total / static_cast<double>(xs.size());
}

BldJobResult TrainBldJob(const Block& child, JobTarget target, int layer,
                         const ParentActivations& train,
                         const ParentActivations& heldout, const BldBudget& budget,
                         std::uint64_t seed) {
  Require(layer >= 0 && layer + 1 < static_cast<int>(train.inputs.size()) &&
              !train.inputs[layer].empty(),
          ErrorCode::kInvalidArgument, "BLD job needs a non-empty training set");
  Require(budget.batch_size >= 1 && budget.eval_every >= 1, ErrorCode::kInvalidArgument,
          "BLD budget needs batch_size >= 1 and eval_every >= 1");
  const ParentActivations& eval = heldout.inputs.empty() ? train : heldout;
  BldJobResult result;
  result.block = child;
  result.init_loss = HeldOutBldLoss(child, layer, eval);
  result.final_loss = result.init_loss;

  Block current = child;
  Block grad = ZerosLike(child);
  Adam adam({budget.lr});
  Rng rng(seed);
  const auto& xs = train.inputs[layer];
  const auto& ys = train.inputs[layer + 1];
  BlockCache cache;
  for (int step = 1; step <= budget.steps; ++step) {
    for (auto& p : TrainableParams(grad, target)) p.value->setZero();
    for (int b = 0; b < budget.batch_size; ++b) {
      const int s = UniformIndex(rng, static_cast<int>(xs.size()));
      const Matrix out = BlockForward(current, xs[s], &cache);
      Matrix d_out;
      BldLoss(ys[s], out, &d_out);
      d_out /= budget.batch_size;
      BlockBackward(current, xs[s], cache, d_out, &grad);
    }
    adam.Step(TrainableParams(current, target), TrainableParams(grad, target));
    if (step % budget.eval_every == 0 || step == budget.steps) {
      const double loss = HeldOutBldLoss(current, layer, eval);
      if (!std::isfinite(loss) || loss > 10.0 * result.init_loss) {
        result.diverged = true;
        result.block = child;
        result.final_loss = result.init_loss;
        return result;
      }
      if (loss < result.final_loss) {
        result.final_loss = loss;
        result.block = current;
      }
    }
  }
  return result;
}

BlockLibrary RunBldJobs(const ToyTransformer& parent, BlockLibrary lib,
                        const BldPlan& plan, const std::vector<int>& order,
                        const Corpus& train, const Corpus& heldout, int workers) {
  Require(!train.empty(), ErrorCode::kInvalidArgument, "empty BLD corpus");
  std::vector<int> sorted = order;
  std::sort(sorted.begin(), sorted.end());
  std::vector<int> expect(plan.jobs.size());
  std::iota(expect.begin(), expect.end(), 0);
  Require(sorted == expect, ErrorCode::kInvalidArgument,
          "job order must be a permutation of the plan");
  const ParentActivations train_acts = ParentActivations::Compute(parent, train);
  const ParentActivations held_acts =
      heldout.empty() ? ParentActivations{} : ParentActivations::Compute(parent, heldout);
  const SearchSpace& space = lib.space();

  // Children are built from the initialized library before any job writes,
  // so every job sees the same starting point whatever the order.
  std::vector<BldJobResult> results(plan.jobs.size());
  ParallelFor(static_cast<int>(order.size()), workers, [&](int i) {
    const BldJob& job = plan.jobs[order[i]];
    Block child;
    const int l = job.layer;
    switch (job.target) {
      case JobTarget::kAttention:
        child = {lib.attention(l, job.attention), parent.layer(l).ffn};
        break;
      case JobTarget::kFfn:
        child = {parent.layer(l).attention, lib.ffn(l, job.ffn)};
        break;
      case JobTarget::kBoth:
        child = {lib.attention(l, job.attention), lib.ffn(l, job.ffn)};
        break;
    }
    BldBudget budget = plan.budget;
    budget.steps = job.steps;
    budget.lr = job.lr;
    results[order[i]] =
        TrainBldJob(child, job.target, l, train_acts, held_acts, budget, job.seed);
  });

  for (std::size_t i = 0; i < plan.jobs.size(); ++i) {
    const BldJob& job = plan.jobs[i];
    const BldJobResult& res = results[i];
    const int l = job.layer;
    LibraryRecord* rec = nullptr;
    if (job.target == JobTarget::kBoth) {
      LibraryRecord r;
      r.layer = l;
      r.target = JobTarget::kBoth;
      r.attention = job.attention;
      r.ffn = job.ffn;
      r.variant_id = space.layer(l).attention[job.attention].id() + "+" +
                     space.layer(l).ffn[job.ffn].id();
      lib.records().push_back(r);
      rec = &lib.records().back();
      lib.SetPair(l, job.attention, job.ffn, res.block);
    } else if (job.target == JobTarget::kAttention) {
      rec = FindRecord(lib.records(), l, JobTarget::kAttention, job.attention, -1);
      lib.SetAttention(l, job.attention, res.block.attention);
    } else {
      rec = FindRecord(lib.records(), l, JobTarget::kFfn, -1, job.ffn);
      lib.SetFfn(l, job.ffn, res.block.ffn);
    }
    Require(rec != nullptr, ErrorCode::kInternal, "library record missing for job");
    rec->seed = job.seed;
    rec->steps = job.steps;
    rec->init_loss = res.init_loss;
    rec->final_loss = res.final_loss;
    rec->diverged = res.diverged;
    if (res.diverged) {
      rec->provenance = Provenance::kInitOnly;
    } else {
      rec->provenance = job.target == JobTarget::kBoth ? Provenance::kCoupledBld
                                                      : Provenance::kDecoupledBld;
    }
  }
  lib.set_mode(plan.mode);
  lib.metadata()["mode"] = BldModeName(plan.mode);
  lib.metadata()["budget"] = {{"steps", plan.budget.steps},
                              {"lr", plan.budget.lr},
                              {"batch_size", plan.budget.batch_size},
                              {"eval_every", plan.budget.eval_every}};
  lib.metadata()["subblock_jobs"] = plan.subblock_jobs;
  lib.metadata()["pair_jobs"] = plan.pair_jobs;
  lib.metadata()["train_fingerprint"] = CorpusFingerprint(train);
  lib.metadata()["heldout_fingerprint"] = CorpusFingerprint(heldout);
  return lib;
}

BlockLibrary RunBld(const ToyTransformer& parent, const SearchSpace& space,
                    BldMode mode, const Corpus& train, const Corpus& heldout,
                    const BldOptions& options) {
  Require(!train.empty(), ErrorCode::kInvalidArgument, "empty BLD corpus");
  BlockLibrary init =
      BuildInitLibrary(parent, space, train, options.calibration_tokens);
  const BldPlan plan = PlanBld(space, mode, options.budget, options.seed);
  std::vector<int> order(plan.jobs.size());
  std::iota(order.begin(), order.end(), 0);
  BlockLibrary lib = RunBldJobs(parent, std::move(init), plan, order, train, heldout,
                                options.workers);
  lib.metadata()["seed"] = options.seed;
  return lib;
}

double CorpusKld(const ToyTransformer& parent, const ToyTransformer& child,
                 const Corpus& corpus) {
  Require(!corpus.empty(), ErrorCode::kInvalidArgument, "empty corpus");
  double total = 0.0;
  for (const Sequence& seq : corpus) {
    total += KldLoss(Forward(parent, seq).logits, Forward(child, seq).logits);
  }
  return total / static_cast<double>(corpus.size());
}

GkdResult RunGkd(const ToyTransformer& child, const ToyTransformer& parent,
                 const GkdLossSpec& spec, const Corpus& train, const Corpus& valid,
                 const GkdBudget& budget) {
  spec.Validate();
  Require(!train.empty() && !valid.empty(), ErrorCode::kInvalidArgument,
          "GKD needs non-empty train and validation corpora");
  Require(child.num_layers() == parent.num_layers(), ErrorCode::kShapeMismatch,
          "GKD child and parent must align layerwise");
  Require(budget.batch_size >= 1 && budget.eval_every >= 1, ErrorCode::kInvalidArgument,
          "GKD budget needs batch_size >= 1 and eval_every >= 1");
  std::vector<ForwardTrace> parent_train;
  for (const Sequence& seq : train) parent_train.push_back(Forward(parent, seq));
  std::vector<Matrix> parent_valid;
  for (const Sequence& seq : valid) parent_valid.push_back(Forward(parent, seq).logits);
  auto validation = [&](const ToyTransformer& m) {
    double total = 0.0;
    for (std::size_t s = 0; s < valid.size(); ++s) {
      total += KldLoss(parent_valid[s], Forward(m, valid[s]).logits);
    }
    return total / static_cast<double>(valid.size());
  };

  GkdResult result;
  result.model = child;
  ToyTransformer model = child;
  ToyTransformer grad = model.ZerosLike();
  const double init_val = validation(model);
  double best_val = init_val;
  result.history.push_back({0, init_val, 0.0});
  Adam adam({budget.lr});
  Rng rng(budget.seed);
  ModelCache cache;
  double running = 0.0;
  int since = 0;
  for (int step = 1; step <= budget.steps; ++step) {
    for (auto& p : grad.Params()) p.value->setZero();
    double total = 0.0;
    for (int b = 0; b < budget.batch_size; ++b) {
      const int s = UniformIndex(rng, static_cast<int>(train.size()));
      ForwardWithCache(model, train[s], &cache);
      std::vector<int> targets;
      if (spec.use_lm) targets = NextTokenTargets(train[s]);
      OutputGrads g;
      total += GkdLoss(spec, cache.trace, parent_train[s],
                       spec.use_lm ? &targets : nullptr, &g);
      const double inv = 1.0 / budget.batch_size;
      g.d_logits *= inv;
      for (auto& d : g.d_hidden) {
        if (d) *d *= inv;
      }
      Backward(model, cache, g, &grad);
    }
    adam.Step(model.Params(), grad.Params());
    running += total / budget.batch_size;
    ++since;
    if (step % budget.eval_every == 0 || step == budget.steps) {
      const double val = validation(model);
      result.history.push_back({step, val, running / since});
      running = 0.0;
      since = 0;
      if (!std::isfinite(val) || (init_val > 0.0 && val > 10.0 * init_val)) {
        result.diverged = true;
        break;
      }
      if (val < best_val) {
        best_val = val;
        result.best_step = step;
        result.model = model;
      }
    }
  }
  return result;
}

std::vector<AblationRow> RunGkdAblation(const ToyTransformer& child,
                                        const ToyTransformer& parent,
                                        const Corpus& train, const Corpus& valid,
                                        const GkdBudget& budget) {
  std::vector<AblationRow> rows;
  AblationRow base;
  base.name = "none";
  base.validation_kld = CorpusKld(parent, child, valid);
  rows.push_back(base);
  const bool combos[7][3] = {{true, false, false},  {true, false, true},
                             {false, false, true},  {true, true, false},
                             {false, true, false},  {true, true, true},
                             {false, true, true}};
  for (const auto& c : combos) {
    const GkdLossSpec spec = GkdLossSpec::Make(c[0], c[1], c[2]);
    const GkdResult res = RunGkd(child, parent, spec, train, valid, budget);
    AblationRow row;
    row.name = spec.name();
    row.use_lm = c[0];
    row.use_cosine = c[1];
    row.use_kld = c[2];
    row.history = res.history;
    row.validation_kld = res.history.back().validation_kld;
    row.kld_increased = res.history.back().validation_kld > res.history.front().validation_kld;
    rows.push_back(row);
  }
  std::vector<int> idx(rows.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    return rows[a].validation_kld < rows[b].validation_kld;
  });
  for (std::size_t r = 0; r < idx.size(); ++r) rows[idx[r]].rank = static_cast<int>(r) + 1;
  return rows;
}

}  // namespace puzzle
