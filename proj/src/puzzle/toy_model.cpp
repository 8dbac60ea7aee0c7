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

#include "puzzle/toy_model.hpp"

#include <cmath>

namespace puzzle {

using nlohmann::json;

namespace {

constexpr double kRmsEps = 1e-6;

double Sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Matrix RmsNormForward(const Matrix& x, const Matrix& scale, NormCache* cache) {
  const Eigen::Index h = x.cols();
  Vector inv_rms(x.rows());
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    inv_rms[t] = 1.0 / std::sqrt(x.row(t).squaredNorm() / h + kRmsEps);
  }
  Matrix xhat = inv_rms.asDiagonal() * x;
  Matrix n = xhat * scale.row(0).asDiagonal();
  if (cache != nullptr) {
    cache->inv_rms = std::move(inv_rms);
    cache->xhat = std::move(xhat);
  }
  return n;
}

// Returns dL/dx; accumulates dL/dscale into d_scale.
Matrix RmsNormBackward(const Matrix& scale, const NormCache& cache,
                       const Matrix& d_n, Matrix* d_scale) {
  const Eigen::Index h = d_n.cols();
  *d_scale += (cache.xhat.cwiseProduct(d_n)).colwise().sum();
  const Matrix d_xhat = d_n * scale.row(0).asDiagonal();
  Matrix d_x(d_n.rows(), h);
  for (Eigen::Index t = 0; t < d_n.rows(); ++t) {
    const double proj = d_xhat.row(t).dot(cache.xhat.row(t)) / h;
    d_x.row(t) = cache.inv_rms[t] * (d_xhat.row(t) - proj * cache.xhat.row(t));
  }
  return d_x;
}

Matrix GqaForward(const AttentionWeights& w, const Matrix& n, AttentionCache* c) {
  const int t_len = static_cast<int>(n.rows());
  const int d = w.head_dim;
  const int group = w.query_heads / w.kv_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Matrix q = n * w.w_q;
  Matrix k = n * w.w_k;
  Matrix v = n * w.w_v;
  Matrix heads_out(t_len, static_cast<Eigen::Index>(w.query_heads) * d);
  std::vector<Matrix> probs(w.query_heads);
  for (int h = 0; h < w.query_heads; ++h) {
    const int g = h / group;
    Matrix s = (q.middleCols(h * d, d) * k.middleCols(g * d, d).transpose()) * scale;
    for (int i = 0; i < t_len; ++i) {
      double mx = s(i, 0);
      for (int j = 1; j <= i; ++j) mx = std::max(mx, s(i, j));
      double total = 0.0;
      for (int j = 0; j <= i; ++j) {
        s(i, j) = std::exp(s(i, j) - mx);
        total += s(i, j);
      }
      for (int j = 0; j <= i; ++j) s(i, j) /= total;
      for (int j = i + 1; j < t_len; ++j) s(i, j) = 0.0;
    }
    heads_out.middleCols(h * d, d) = s * v.middleCols(g * d, d);
    probs[h] = std::move(s);
  }
  Matrix out = heads_out * w.w_o;
  if (c != nullptr) {
    c->q = std::move(q);
    c->k = std::move(k);
    c->v = std::move(v);
    c->probs = std::move(probs);
    c->heads_out = std::move(heads_out);
  }
  return out;
}

// Returns dL/dn.
Matrix GqaBackward(const AttentionWeights& w, const AttentionCache& c,
                   const Matrix& d_out, AttentionWeights* g) {
  const int d = w.head_dim;
  const int group = w.query_heads / w.kv_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  g->w_o += c.heads_out.transpose() * d_out;
  const Matrix d_heads = d_out * w.w_o.transpose();
  Matrix d_q = Matrix::Zero(c.q.rows(), c.q.cols());
  Matrix d_k = Matrix::Zero(c.k.rows(), c.k.cols());
  Matrix d_v = Matrix::Zero(c.v.rows(), c.v.cols());
  for (int h = 0; h < w.query_heads; ++h) {
    const int kv = h / group;
    const Matrix& p = c.probs[h];
    const auto d_o = d_heads.middleCols(h * d, d);
    d_v.middleCols(kv * d, d) += p.transpose() * d_o;
    const Matrix d_p = d_o * c.v.middleCols(kv * d, d).transpose();
    const Vector row_dot = (d_p.cwiseProduct(p)).rowwise().sum();
    Matrix d_s = p.cwiseProduct(d_p.colwise() - row_dot) * scale;
    d_q.middleCols(h * d, d) += d_s * c.k.middleCols(kv * d, d);
    d_k.middleCols(kv * d, d) += d_s.transpose() * c.q.middleCols(h * d, d);
  }
  g->w_q += c.n.transpose() * d_q;
  g->w_k += c.n.transpose() * d_k;
  g->w_v += c.n.transpose() * d_v;
  return d_q * w.w_q.transpose() + d_k * w.w_k.transpose() +
         d_v * w.w_v.transpose();
}

void CheckFinite(const Matrix& m, bool* ok) {
  if (m.size() > 0 && !m.allFinite()) *ok = false;
}

}  // namespace

Matrix RowSoftmax(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (Eigen::Index t = 0; t < logits.rows(); ++t) {
    const double mx = logits.row(t).maxCoeff();
    p.row(t) = (logits.row(t).array() - mx).exp().matrix();
    p.row(t) /= p.row(t).sum();
  }
  return p;
}

void ModelConfig::Validate() const {
  Require(num_layers > 0 && hidden_dim > 0 && query_heads > 0 && head_dim > 0 &&
              kv_heads > 0 && intermediate_dim > 0 && vocab_size > 0 &&
              max_seq_len > 0,
          ErrorCode::kInvalidArgument, "model config fields must be positive");
  Require(hidden_dim == query_heads * head_dim, ErrorCode::kInvalidArgument,
          "hidden_dim must equal query_heads * head_dim");
  Require(query_heads % kv_heads == 0, ErrorCode::kInvalidArgument,
          "kv_heads must divide query_heads");
}

ParentShape ModelConfig::parent_shape() const {
  return {query_heads, head_dim, kv_heads, intermediate_dim};
}

json ModelConfig::ToJson() const {
  return {{"num_layers", num_layers},       {"hidden_dim", hidden_dim},
          {"query_heads", query_heads},     {"head_dim", head_dim},
          {"kv_heads", kv_heads},           {"intermediate_dim", intermediate_dim},
          {"vocab_size", vocab_size},       {"max_seq_len", max_seq_len}};
}

ModelConfig ModelConfig::FromJson(const json& doc) {
  ModelConfig c;
  try {
    c.num_layers = doc.value("num_layers", c.num_layers);
    c.hidden_dim = doc.value("hidden_dim", c.hidden_dim);
    c.query_heads = doc.value("query_heads", c.query_heads);
    c.head_dim = doc.value("head_dim", c.head_dim);
    c.kv_heads = doc.value("kv_heads", c.kv_heads);
    c.intermediate_dim = doc.value("intermediate_dim", c.intermediate_dim);
    c.vocab_size = doc.value("vocab_size", c.vocab_size);
    c.max_seq_len = doc.value("max_seq_len", c.max_seq_len);
  } catch (const json::exception& e) {
    Fail(ErrorCode::kSchema, std::string("model config: ") + e.what());
  }
  c.Validate();
  return c;
}

std::vector<NamedParam> SubblockParams(AttentionBlock& a, const std::string& prefix) {
  std::vector<NamedParam> out;
  auto add = [&](const char* name, Matrix& m) {
    if (m.size() > 0) out.push_back({prefix + name, &m});
  };
  if (a.kind == AttentionKind::kGqa) {
    add("wq", a.gqa.w_q);
    add("wk", a.gqa.w_k);
    add("wv", a.gqa.w_v);
    add("wo", a.gqa.w_o);
  } else if (a.kind == AttentionKind::kLinear) {
    add("linear", a.linear);
  }
  if (a.kind != AttentionKind::kNoOp) add("norm", a.norm);
  return out;
}

std::vector<NamedParam> SubblockParams(FfnBlock& f, const std::string& prefix) {
  std::vector<NamedParam> out;
  auto add = [&](const char* name, Matrix& m) {
    if (m.size() > 0) out.push_back({prefix + name, &m});
  };
  if (f.kind == FfnKind::kGated) {
    add("up", f.gated.w_up);
    add("gate", f.gated.w_gate);
    add("down", f.gated.w_down);
  } else if (f.kind == FfnKind::kLinear) {
    add("linear", f.linear);
  }
  if (f.kind != FfnKind::kNoOp) add("norm", f.norm);
  return out;
}

std::vector<NamedParam> BlockParams(Block& b, const std::string& prefix) {
  auto out = SubblockParams(b.attention, prefix + "attn.");
  auto ffn = SubblockParams(b.ffn, prefix + "ffn.");
  out.insert(out.end(), ffn.begin(), ffn.end());
  return out;
}

AttentionBlock ZerosLike(const AttentionBlock& a) {
  AttentionBlock z = a;
  for (auto& p : SubblockParams(z, "")) p.value->setZero();
  return z;
}

FfnBlock ZerosLike(const FfnBlock& f) {
  FfnBlock z = f;
  for (auto& p : SubblockParams(z, "")) p.value->setZero();
  return z;
}

Block ZerosLike(const Block& b) { return {ZerosLike(b.attention), ZerosLike(b.ffn)}; }

AttentionBlock NoOpAttention() { return AttentionBlock{}; }
FfnBlock NoOpFfn() { return FfnBlock{}; }

long long ParameterCount(const AttentionBlock& a) {
  switch (a.kind) {
    case AttentionKind::kGqa:
      return a.gqa.w_q.size() + a.gqa.w_k.size() + a.gqa.w_v.size() +
             a.gqa.w_o.size();
    case AttentionKind::kLinear:
      return a.linear.size();
    case AttentionKind::kNoOp:
      return 0;
  }
  return 0;
}

long long ParameterCount(const FfnBlock& f) {
  switch (f.kind) {
    case FfnKind::kGated:
      return f.gated.w_up.size() + f.gated.w_gate.size() + f.gated.w_down.size();
    case FfnKind::kLinear:
      return f.linear.size();
    case FfnKind::kNoOp:
      return 0;
  }
  return 0;
}

AttentionVariant DescribeVariant(const AttentionBlock& a) {
  switch (a.kind) {
    case AttentionKind::kGqa:
      return AttentionVariant::Gqa(a.gqa.kv_heads, a.gqa.query_heads,
                                   a.gqa.head_dim);
    case AttentionKind::kLinear:
      return AttentionVariant::Linear();
    case AttentionKind::kNoOp:
      break;
  }
  return AttentionVariant::NoOp();
}

FfnVariant DescribeVariant(const FfnBlock& f, int parent_intermediate) {
  switch (f.kind) {
    case FfnKind::kGated:
      return FfnVariant::Gated(static_cast<double>(f.gated.intermediate_dim()) /
                               parent_intermediate);
    case FfnKind::kLinear:
      return FfnVariant::Linear();
    case FfnKind::kNoOp:
      break;
  }
  return FfnVariant::NoOp();
}

ToyTransformer::ToyTransformer(const ModelConfig& config) : config_(config) {
  config_.Validate();
  layers_.resize(config_.num_layers);
}

ToyTransformer ToyTransformer::Random(const ModelConfig& config,
                                      std::uint64_t seed) {
  ToyTransformer m(config);
  Rng rng(seed);
  const int h = config.hidden_dim;
  const int qd = config.query_heads * config.head_dim;
  const int kvd = config.kv_heads * config.head_dim;
  const int inter = config.intermediate_dim;
  auto normal = [&](Eigen::Index r, Eigen::Index c, double sd) {
    Matrix x(r, c);
    FillNormal(x, sd, rng);
    return x;
  };
  m.embedding = normal(config.vocab_size, h, 1.0);
  m.position = normal(config.max_seq_len, h, 0.5);
  const double in_sd = 1.0 / std::sqrt(static_cast<double>(h));
  for (Block& b : m.layers_) {
    b.attention.kind = AttentionKind::kGqa;
    b.attention.gqa.query_heads = config.query_heads;
    b.attention.gqa.kv_heads = config.kv_heads;
    b.attention.gqa.head_dim = config.head_dim;
    b.attention.gqa.w_q = normal(h, qd, in_sd);
    b.attention.gqa.w_k = normal(h, kvd, in_sd);
    b.attention.gqa.w_v = normal(h, kvd, in_sd);
    b.attention.gqa.w_o = normal(qd, h, 0.5 / std::sqrt(static_cast<double>(qd)));
    b.attention.norm = Matrix::Ones(1, h);
    b.ffn.kind = FfnKind::kGated;
    b.ffn.gated.w_up = normal(h, inter, in_sd);
    b.ffn.gated.w_gate = normal(h, inter, in_sd);
    b.ffn.gated.w_down =
        normal(inter, h, 0.5 / std::sqrt(static_cast<double>(inter)));
    b.ffn.norm = Matrix::Ones(1, h);
  }
  m.final_norm = Matrix::Ones(1, h);
  m.head = normal(h, config.vocab_size, in_sd);
  return m;
}

Block& ToyTransformer::layer(int i) {
  Require(i >= 0 && i < num_layers(), ErrorCode::kOutOfRange,
          "layer index " + std::to_string(i) + " out of range");
  return layers_[i];
}

const Block& ToyTransformer::layer(int i) const {
  Require(i >= 0 && i < num_layers(), ErrorCode::kOutOfRange,
          "layer index " + std::to_string(i) + " out of range");
  return layers_[i];
}

std::vector<NamedParam> ToyTransformer::Params() {
  std::vector<NamedParam> out = {{"embedding", &embedding}, {"position", &position}};
  for (int i = 0; i < num_layers(); ++i) {
    auto p = BlockParams(layers_[i], "layers." + std::to_string(i) + ".");
    out.insert(out.end(), p.begin(), p.end());
  }
  out.push_back({"final_norm", &final_norm});
  out.push_back({"head", &head});
  return out;
}

ToyTransformer ToyTransformer::ZerosLike() const {
  ToyTransformer z = *this;
  for (auto& p : z.Params()) p.value->setZero();
  return z;
}

bool ToyTransformer::AllFinite() const {
  bool ok = true;
  auto& self = const_cast<ToyTransformer&>(*this);
  for (auto& p : self.Params()) CheckFinite(*p.value, &ok);
  return ok;
}

json ToyTransformer::DescribeLayers() const {
  json layers = json::array();
  for (const Block& b : layers_) {
    layers.push_back(
        {{"attention", DescribeVariant(b.attention).id()},
         {"ffn", DescribeVariant(b.ffn, config_.intermediate_dim).id()},
         {"ffn_intermediate", b.ffn.kind == FfnKind::kGated
                                  ? b.ffn.gated.intermediate_dim()
                                  : 0}});
  }
  return layers;
}

TensorMap ToyTransformer::ToTensors() const {
  TensorMap out;
  auto& self = const_cast<ToyTransformer&>(*this);
  for (auto& p : self.Params()) out.emplace(p.name, *p.value);
  return out;
}

void ToyTransformer::Save(const std::string& path, const json& extra) const {
  json meta = {{"kind", "toy_transformer"},
               {"config", config_.ToJson()},
               {"layers", DescribeLayers()}};
  if (extra.is_object()) {
    for (const auto& [k, v] : extra.items()) meta[k] = v;
  }
  WriteTensorFile(path, ToTensors(), meta);
}

ToyTransformer ToyTransformer::FromTensors(const TensorFile& file) {
  try {
    const json& meta = file.metadata;
    Require(meta.value("kind", "") == "toy_transformer", ErrorCode::kSchema,
            "checkpoint is not a toy transformer");
    ToyTransformer m(ModelConfig::FromJson(meta.at("config")));
    auto take = [&](const std::string& name) -> Matrix {
      auto it = file.tensors.find(name);
      Require(it != file.tensors.end(), ErrorCode::kSchema,
              "checkpoint missing tensor " + name);
      return it->second;
    };
    m.embedding = take("embedding");
    m.position = take("position");
    m.final_norm = take("final_norm");
    m.head = take("head");
    const json& layers = meta.at("layers");
    Require(static_cast<int>(layers.size()) == m.num_layers(), ErrorCode::kSchema,
            "checkpoint layer count mismatch");
    const ModelConfig& c = m.config_;
    for (int i = 0; i < m.num_layers(); ++i) {
      const std::string p = "layers." + std::to_string(i) + ".";
      Block& b = m.layers_[i];
      const std::string attn = layers[i].at("attention").get<std::string>();
      if (attn == "attn:noop") {
        b.attention = NoOpAttention();
      } else if (attn == "attn:linear") {
        b.attention.kind = AttentionKind::kLinear;
        b.attention.linear = take(p + "attn.linear");
        b.attention.norm = take(p + "attn.norm");
      } else {
        b.attention.kind = AttentionKind::kGqa;
        b.attention.gqa.w_q = take(p + "attn.wq");
        b.attention.gqa.w_k = take(p + "attn.wk");
        b.attention.gqa.w_v = take(p + "attn.wv");
        b.attention.gqa.w_o = take(p + "attn.wo");
        b.attention.gqa.query_heads = c.query_heads;
        b.attention.gqa.head_dim = c.head_dim;
        b.attention.gqa.kv_heads =
            static_cast<int>(b.attention.gqa.w_k.cols()) / c.head_dim;
        b.attention.gqa.CheckShapes();
        b.attention.norm = take(p + "attn.norm");
      }
      const std::string ffn = layers[i].at("ffn").get<std::string>();
      if (ffn == "ffn:noop") {
        b.ffn = NoOpFfn();
      } else if (ffn == "ffn:linear") {
        b.ffn.kind = FfnKind::kLinear;
        b.ffn.linear = take(p + "ffn.linear");
        b.ffn.norm = take(p + "ffn.norm");
      } else {
        b.ffn.kind = FfnKind::kGated;
        b.ffn.gated.w_up = take(p + "ffn.up");
        b.ffn.gated.w_gate = take(p + "ffn.gate");
        b.ffn.gated.w_down = take(p + "ffn.down");
        b.ffn.gated.CheckShapes();
        b.ffn.norm = take(p + "ffn.norm");
      }
    }
    return m;
  } catch (const json::exception& e) {
    Fail(ErrorCode::kSchema, std::string("checkpoint: ") + e.what());
  }
}

ToyTransformer ToyTransformer::Load(const std::string& path) {
  return FromTensors(ReadTensorFile(path));
}

Matrix AttentionBranch(const AttentionBlock& a, const Matrix& x,
                       AttentionCache* cache) {
  if (a.kind == AttentionKind::kNoOp) return Matrix::Zero(x.rows(), x.cols());
  Require(a.norm.cols() == x.cols(), ErrorCode::kShapeMismatch,
          "attention norm width mismatch");
  NormCache norm;
  Matrix n = RmsNormForward(x, a.norm, &norm);
  Matrix out;
  if (a.kind == AttentionKind::kLinear) {
    out = n * a.linear;
  } else {
    Require(a.gqa.hidden_dim() == x.cols(), ErrorCode::kShapeMismatch,
            "attention projection width mismatch");
    out = GqaForward(a.gqa, n, cache);
  }
  if (cache != nullptr) {
    cache->norm = std::move(norm);
    cache->n = std::move(n);
  }
  return out;
}

Matrix FfnBranch(const FfnBlock& f, const Matrix& x, FfnCache* cache) {
  if (f.kind == FfnKind::kNoOp) return Matrix::Zero(x.rows(), x.cols());
  Require(f.norm.cols() == x.cols(), ErrorCode::kShapeMismatch,
          "FFN norm width mismatch");
  NormCache norm;
  Matrix n = RmsNormForward(x, f.norm, &norm);
  Matrix out;
  if (f.kind == FfnKind::kLinear) {
    out = n * f.linear;
  } else {
    Require(f.gated.hidden_dim() == x.cols(), ErrorCode::kShapeMismatch,
            "FFN projection width mismatch");
    Matrix up = n * f.gated.w_up;
    Matrix gate = n * f.gated.w_gate;
    Matrix act = gate.unaryExpr([](double g) { return g * Sigmoid(g); })
                     .cwiseProduct(up);
    out = act * f.gated.w_down;
    if (cache != nullptr) {
      cache->up = std::move(up);
      cache->gate = std::move(gate);
      cache->act = std::move(act);
    }
  }
  if (cache != nullptr) {
    cache->norm = std::move(norm);
    cache->n = std::move(n);
  }
  return out;
}

Matrix BlockForward(const Block& block, const Matrix& x, BlockCache* cache) {
  Matrix mid = x + AttentionBranch(block.attention, x,
                                   cache ? &cache->attention : nullptr);
  Matrix out = mid + FfnBranch(block.ffn, mid, cache ? &cache->ffn : nullptr);
  if (cache != nullptr) cache->mid = std::move(mid);
  return out;
}

Matrix BlockBackward(const Block& block, const Matrix& x, const BlockCache& cache,
                     const Matrix& d_out, Block* grad) {
  (void)x;
  // FFN branch: out = mid + F(mid).
  Matrix d_mid = d_out;
  const FfnBlock& f = block.ffn;
  if (f.kind != FfnKind::kNoOp) {
    const FfnCache& c = cache.ffn;
    Matrix d_n;
    if (f.kind == FfnKind::kLinear) {
      grad->ffn.linear += c.n.transpose() * d_out;
      d_n = d_out * f.linear.transpose();
    } else {
      const FfnWeights& w = f.gated;
      grad->ffn.gated.w_down += c.act.transpose() * d_out;
      const Matrix d_act = d_out * w.w_down.transpose();
      const Matrix silu = c.gate.unaryExpr([](double g) { return g * Sigmoid(g); });
      const Matrix dsilu = c.gate.unaryExpr([](double g) {
        const double s = Sigmoid(g);
        return s * (1.0 + g * (1.0 - s));
      });
      const Matrix d_up = d_act.cwiseProduct(silu);
      const Matrix d_gate = d_act.cwiseProduct(c.up).cwiseProduct(dsilu);
      grad->ffn.gated.w_up += c.n.transpose() * d_up;
      grad->ffn.gated.w_gate += c.n.transpose() * d_gate;
      d_n = d_up * w.w_up.transpose() + d_gate * w.w_gate.transpose();
    }
    d_mid += RmsNormBackward(f.norm, c.norm, d_n, &grad->ffn.norm);
  }
  // Attention branch: mid = x + A(x).
  Matrix d_x = d_mid;
  const AttentionBlock& a = block.attention;
  if (a.kind != AttentionKind::kNoOp) {
    const AttentionCache& c = cache.attention;
    Matrix d_n;
    if (a.kind == AttentionKind::kLinear) {
      grad->attention.linear += c.n.transpose() * d_mid;
      d_n = d_mid * a.linear.transpose();
    } else {
      d_n = GqaBackward(a.gqa, c, d_mid, &grad->attention.gqa);
    }
    d_x += RmsNormBackward(a.norm, c.norm, d_n, &grad->attention.norm);
  }
  return d_x;
}

namespace {

Matrix EmbedTokens(const ToyTransformer& model, const std::vector<int>& tokens) {
  const ModelConfig& c = model.config();
  Require(!tokens.empty(), ErrorCode::kInvalidArgument, "empty token sequence");
  Require(static_cast<int>(tokens.size()) <= c.max_seq_len,
          ErrorCode::kInvalidArgument, "sequence longer than max_seq_len");
  Matrix x(static_cast<Eigen::Index>(tokens.size()), c.hidden_dim);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    Require(tokens[t] >= 0 && tokens[t] < c.vocab_size, ErrorCode::kOutOfRange,
            "token id " + std::to_string(tokens[t]) + " out of range");
    x.row(static_cast<Eigen::Index>(t)) =
        model.embedding.row(tokens[t]) + model.position.row(static_cast<Eigen::Index>(t));
  }
  return x;
}

}  // namespace

void ForwardWithCache(const ToyTransformer& model, const std::vector<int>& tokens,
                      ModelCache* cache) {
  cache->tokens = tokens;
  cache->inputs.clear();
  cache->blocks.assign(model.num_layers(), BlockCache{});
  cache->trace.hidden.clear();
  Matrix x = EmbedTokens(model, tokens);
  for (int l = 0; l < model.num_layers(); ++l) {
    cache->inputs.push_back(x);
    x = BlockForward(model.layer(l), x, &cache->blocks[l]);
    cache->trace.hidden.push_back(x);
  }
  cache->final_n = RmsNormForward(x, model.final_norm, &cache->final_norm);
  cache->trace.logits = cache->final_n * model.head;
  cache->trace.probs = RowSoftmax(cache->trace.logits);
}

ForwardTrace Forward(const ToyTransformer& model, const std::vector<int>& tokens) {
  ForwardTrace trace;
  Matrix x = EmbedTokens(model, tokens);
  for (int l = 0; l < model.num_layers(); ++l) {
    x = BlockForward(model.layer(l), x, nullptr);
    trace.hidden.push_back(x);
  }
  trace.logits = RmsNormForward(x, model.final_norm, nullptr) * model.head;
  trace.probs = RowSoftmax(trace.logits);
  return trace;
}

Matrix ParentInputAt(const ToyTransformer& parent, const std::vector<int>& tokens,
                     int layer) {
  Require(layer >= 0 && layer < parent.num_layers(), ErrorCode::kOutOfRange,
          "layer index out of range");
  Matrix x = EmbedTokens(parent, tokens);
  for (int l = 0; l < layer; ++l) x = BlockForward(parent.layer(l), x, nullptr);
  return x;
}

Matrix LogitsFrom(const ToyTransformer& model, int layer, const Matrix& x) {
  Require(layer >= 0 && layer <= model.num_layers(), ErrorCode::kOutOfRange,
          "layer index out of range");
  Matrix h = x;
  for (int l = layer; l < model.num_layers(); ++l) h = BlockForward(model.layer(l), h, nullptr);
  return RmsNormForward(h, model.final_norm, nullptr) * model.head;
}

BlockOutputs ForwardWithParentInputs(const ToyTransformer& parent,
                                     const Block& child_block, int layer,
                                     const std::vector<int>& tokens) {
  const Matrix x = ParentInputAt(parent, tokens, layer);
  BlockOutputs out;
  out.o_parent = BlockForward(parent.layer(layer), x, nullptr);
  out.o_child = BlockForward(child_block, x, nullptr);
  return out;
}

void Backward(const ToyTransformer& model, const ModelCache& cache,
              const OutputGrads& upstream, ToyTransformer* grad) {
  const int n_layers = model.num_layers();
  const Eigen::Index t_len = static_cast<Eigen::Index>(cache.tokens.size());
  Matrix d_x = Matrix::Zero(t_len, model.config().hidden_dim);
  if (upstream.d_logits.size() > 0) {
    grad->head += cache.final_n.transpose() * upstream.d_logits;
    const Matrix d_n = upstream.d_logits * model.head.transpose();
    d_x += RmsNormBackward(model.final_norm, cache.final_norm, d_n,
                           &grad->final_norm);
  }
  for (int l = n_layers - 1; l >= 0; --l) {
    if (l < static_cast<int>(upstream.d_hidden.size()) && upstream.d_hidden[l]) {
      d_x += *upstream.d_hidden[l];
    }
    d_x = BlockBackward(model.layer(l), cache.inputs[l], cache.blocks[l], d_x,
                        &grad->layer(l));
  }
  for (Eigen::Index t = 0; t < t_len; ++t) {
    grad->embedding.row(cache.tokens[t]) += d_x.row(t);
    grad->position.row(t) += d_x.row(t);
  }
}

}  // namespace puzzle
