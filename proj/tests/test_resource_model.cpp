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

#include <cmath>
#include <filesystem>
#include <sstream>
#include <string>

#include "doctest.h"
#include "puzzle/resource_model.hpp"
#include "puzzle/toy_model.hpp"

using namespace puzzle;

namespace {

ParentShape Shape64() { return ParentShape{8, 8, 8, 256}; }

bool Near(double a, double b, double tol) {
  return std::abs(a - b) <= tol * std::max(1.0, std::abs(b));
}

}  // namespace

TEST_CASE("kv cache of 8 KB per token at 8192 tokens and batch 64 is 4 GiB") {
  const AttentionVariant v = AttentionVariant::Gqa(32, 32, 128);
  const double per_token = KvBytesPerToken(v, 1.0);
  CHECK(per_token == 8192.0);
  Scenario s{64, 4096, 4096, 1.0};
  const double per_seq = KvCacheBytes(v, s);
  CHECK(per_seq == 8192.0 * 8192.0);
  CHECK(KvCacheBytesForBatch(per_token, s.seq_len(), 64) == std::ldexp(1.0, 32));
}

TEST_CASE("kv cache is zero for no-op and linear attention") {
  Scenario s;
  CHECK(KvCacheBytes(AttentionVariant::NoOp(), s) == 0.0);
  CHECK(KvCacheBytes(AttentionVariant::Linear(), s) == 0.0);
}

TEST_CASE("halving kv heads halves kv bytes exactly") {
  Scenario s{1, 100, 28, 2.0};
  for (int kv : {8, 4, 2}) {
    CHECK(KvCacheBytes(AttentionVariant::Gqa(kv / 2, 8, 8), s) * 2 ==
          KvCacheBytes(AttentionVariant::Gqa(kv, 8, 8), s));
  }
  CHECK(KvCacheBytes(AttentionVariant::Gqa(4, 8, 8), s, 1.5) ==
        1.5 * KvCacheBytes(AttentionVariant::Gqa(4, 8, 8), s));
}

TEST_CASE("parameter bytes") {
  const ParentShape p = Shape64();
  CHECK(ParamBytes(AttentionVariant::NoOp(), FfnVariant::NoOp(), p, 1.0) == 0.0);
  CHECK(ParamCount(FfnVariant::Gated(1.0), p) == 49152);
  CHECK(ParamBytes(AttentionVariant::NoOp(), FfnVariant::Gated(1.0), p, 2.0) == 98304.0);
  // K and V projections are 2 * H * kv * d; Q and O are unchanged.
  const long long qo = 2LL * 64 * 64;
  const long long kv8 = ParamCount(AttentionVariant::Gqa(8, 8, 8), p) - qo;
  const long long kv1 = ParamCount(AttentionVariant::Gqa(1, 8, 8), p) - qo;
  CHECK(kv8 == 2LL * 64 * 64);
  CHECK(kv8 == 8 * kv1);
  CHECK(ParamCount(AttentionVariant::Linear(), p) == 64 * 64);
  CHECK(ParamCount(FfnVariant::Linear(), p) == 64 * 64);
}

TEST_CASE("parameter counts agree with materialized blocks") {
  ModelConfig c;
  c.num_layers = 1;
  const ToyTransformer m = ToyTransformer::Random(c, 3);
  const ParentShape p = c.parent_shape();
  CHECK(ParamCount(AttentionVariant::Gqa(8, 8, 8), p) ==
        ParameterCount(m.layer(0).attention));
  CHECK(ParamCount(FfnVariant::Gated(1.0), p) == ParameterCount(m.layer(0).ffn));
}

TEST_CASE("no-op subblocks cost nothing even with launch overhead") {
  HardwareProfile hw;
  hw.launch_overhead_seconds = 1e-5;
  Scenario s{4, 32, 32, 1.0};
  const PhaseRuntime r =
      AnalyticRuntime(AttentionVariant::NoOp(), FfnVariant::NoOp(), Shape64(), s, hw);
  CHECK(r.prefill_seconds == 0.0);
  CHECK(r.generation_seconds == 0.0);
  CHECK(AnalyticRuntime(FfnVariant::Linear(), Shape64(), s, hw).prefill_seconds > 1e-5);
}

TEST_CASE("per-token generation runtime is nonincreasing in batch size") {
  HardwareProfile hw;
  hw.launch_overhead_seconds = 2e-6;
  const ParentShape p = Shape64();
  const std::vector<AttentionVariant> attn = {AttentionVariant::Gqa(8, 8, 8),
                                              AttentionVariant::Gqa(1, 8, 8),
                                              AttentionVariant::Linear()};
  const std::vector<FfnVariant> ffn = {FfnVariant::Gated(1.0), FfnVariant::Gated(0.25),
                                       FfnVariant::Linear()};
  for (const auto& a : attn) {
    for (const auto& f : ffn) {
      double prev = INFINITY;
      for (int b = 1; b <= 256; ++b) {
        Scenario s{b, 64, 64, 1.0};
        const double per_token =
            AnalyticRuntime(a, f, p, s, hw).generation_seconds / (b * s.generation_len);
        CHECK(per_token <= prev * (1 + 1e-12));
        prev = per_token;
      }
    }
  }
}

TEST_CASE("IO-bound generation matches the closed form") {
  HardwareProfile hw;
  hw.bytes_per_second = 1e6;
  hw.flops_per_second = 1e15;
  const ParentShape p = Shape64();
  Scenario s{1, 16, 48, 1.0};
  const FfnVariant f = FfnVariant::Gated(0.5);
  const double bytes = ParamBytes(AttentionVariant::NoOp(), f, p, 1.0);
  const PhaseRuntime r = AnalyticRuntime(AttentionVariant::NoOp(), f, p, s, hw);
  const double expected = bytes / hw.bytes_per_second * s.generation_len;
  CHECK(std::abs(r.generation_seconds - expected) <= 1e-9);
}

TEST_CASE("utilization curve is nondecreasing and capped") {
  HardwareProfile hw;
  double prev = 0;
  for (int m = 0; m <= 1000; ++m) {
    const double u = hw.Utilization(m);
    CHECK(u >= prev);
    CHECK(u <= 1.0);
    CHECK(u >= hw.min_utilization);
    prev = u;
  }
}

TEST_CASE("parent variant upper-bounds reduced variants of the same kind") {
  const SearchSpace space = SearchSpace::Default(2, Shape64());
  const ResourceTable t =
      BuildAnalyticTable(space, Scenario{}, {1, 4, 16, 64, 256}, HardwareProfile{});
  for (int l = 0; l < 2; ++l) {
    const LayerMenu& menu = space.layer(l);
    const int pa = space.parent_attention_index(l);
    const int pf = space.parent_ffn_index(l);
    for (int b : t.batches()) {
      for (int j = 0; j < static_cast<int>(menu.attention.size()); ++j) {
        if (menu.attention[j].kind != AttentionKind::kGqa) continue;
        CHECK(t.mem_params(l, Subblock::kAttention, j) <=
              t.mem_params(l, Subblock::kAttention, pa));
        CHECK(t.mem_kv(l, Subblock::kAttention, j) <= t.mem_kv(l, Subblock::kAttention, pa));
        CHECK(t.runtime(l, Subblock::kAttention, j, b).runtime.total() <=
              t.runtime(l, Subblock::kAttention, pa, b).runtime.total());
      }
      for (int k = 0; k < static_cast<int>(menu.ffn.size()); ++k) {
        if (menu.ffn[k].kind != FfnKind::kGated) continue;
        CHECK(t.mem_params(l, Subblock::kFfn, k) <= t.mem_params(l, Subblock::kFfn, pf));
        CHECK(t.runtime(l, Subblock::kFfn, k, b).runtime.total() <=
              t.runtime(l, Subblock::kFfn, pf, b).runtime.total());
      }
    }
  }
}

TEST_CASE("table invariants: nonnegative, no-op zero, complete, kv linear in batch") {
  const SearchSpace space = SearchSpace::Default(3, Shape64());
  const ResourceTable t = BuildAnalyticTable(space, Scenario{}, {1, 8, 64}, HardwareProfile{});
  CHECK_NOTHROW(t.CheckComplete(space));
  for (int l = 0; l < 3; ++l) {
    for (Subblock s : {Subblock::kAttention, Subblock::kFfn}) {
      for (const auto& e : t.entries(l, s)) {
        CHECK(e.mem_params_bytes >= 0);
        CHECK(e.mem_kv_bytes_per_token >= 0);
        const bool noop = e.variant_id.find("noop") != std::string::npos;
        for (const auto& [b, r] : e.runtime) {
          CHECK(r.prefill_seconds >= 0);
          CHECK(r.generation_seconds >= 0);
          if (noop) CHECK(r.total() == 0.0);
          const double per_seq = t.mem_kv(l, s, e.index);
          CHECK(KvCacheBytesForBatch(e.mem_kv_bytes_per_token, t.seq_len(), b) ==
                b * per_seq);
        }
        if (noop) {
          CHECK(e.mem_params_bytes == 0.0);
          CHECK(e.mem_kv_bytes_per_token == 0.0);
        }
      }
    }
  }
  const SearchSpace bigger = SearchSpace::Default(4, Shape64());
  CHECK_THROWS_AS(t.CheckComplete(bigger), Error);
}

TEST_CASE("export then ingest reproduces the table") {
  const SearchSpace space = SearchSpace::Default(2, Shape64());
  const ResourceTable t =
      BuildAnalyticTable(space, Scenario{1, 24, 40, 1.0}, {1, 2, 16, 128}, HardwareProfile{});
  IngestReport rep;
  const ResourceTable csv = IngestMeasurements(t.ToCsv(), space, &rep);
  CHECK(csv == t);
  CHECK(rep.filled == 0);
  CHECK(rep.warnings.empty());
  const ResourceTable js = IngestMeasurements(t.ToJson().dump(), space);
  CHECK(js == t);
  CHECK(js.Fingerprint() == t.Fingerprint());

  const auto dir = std::filesystem::temp_directory_path() / "puzzle_resource_test";
  std::filesystem::create_directories(dir);
  SaveTable(t, (dir / "t.csv").string());
  SaveTable(t, (dir / "t.json").string());
  CHECK(LoadMeasurements((dir / "t.csv").string(), space) == t);
  CHECK(LoadMeasurements((dir / "t.json").string(), space) == t);
  std::filesystem::remove_all(dir);
}

TEST_CASE("missing variant rows are reported by layer and variant") {
  const SearchSpace space = SearchSpace::Default(2, Shape64());
  const ResourceTable t = BuildAnalyticTable(space, Scenario{}, {1}, HardwareProfile{});
  std::string csv = t.ToCsv();
  const std::string needle = "\n1,ffn:r0.250,";
  const auto at = csv.find(needle);
  REQUIRE(at != std::string::npos);
  csv.erase(at + 1, csv.find('\n', at + 1) - at);
  try {
    IngestMeasurements(csv, space);
    FAIL("expected a schema error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kSchema);
    const std::string msg = e.what();
    CHECK(msg.find("layer 1") != std::string::npos);
    CHECK(msg.find("ffn:r0.250") != std::string::npos);
  }
}

namespace {

std::string Header() {
  return "layer,variant_id,batch,prefill_len,generation_len,prefill_seconds,"
         "generation_seconds,mem_params_bytes,mem_kv_bytes_per_token\n";
}

SearchSpace OneLayerSpace() {
  MenuSpec m;
  m.kv_heads = {8};
  m.attention_linear = false;
  m.attention_no_op = true;
  m.ffn_ratios = {1.0};
  m.ffn_linear = false;
  m.ffn_no_op = true;
  return SearchSpace::Uniform(1, Shape64(), m);
}

std::string Rows(const std::string& id, int b, double pre, double gen, double params,
                 double kv) {
  return "0," + id + "," + std::to_string(b) + ",8,8," + std::to_string(pre) + "," +
         std::to_string(gen) + "," + std::to_string(params) + "," + std::to_string(kv) +
         "\n";
}

}  // namespace

TEST_CASE("interpolation at b=32 between 16 and 64 is the midpoint of linear data") {
  const SearchSpace space = OneLayerSpace();
  std::string csv = Header();
  // Linear in b: prefill 1 + 0.5 b, generation 2 + 0.25 b.
  csv += Rows("attn:gqa8", 16, 9, 6, 100, 16);
  csv += Rows("attn:gqa8", 64, 33, 18, 100, 16);
  csv += Rows("attn:noop", 16, 0, 0, 0, 0);
  csv += Rows("ffn:r1.000", 16, 1, 1, 50, 0);
  csv += Rows("ffn:r1.000", 32, 2, 2, 50, 0);
  csv += Rows("ffn:noop", 64, 0, 0, 0, 0);
  IngestReport rep;
  const ResourceTable t = IngestMeasurements(csv, space, &rep);
  const RuntimeQuery q = t.runtime(0, Subblock::kAttention, 0, 32);
  CHECK(q.runtime.prefill_seconds == doctest::Approx(17.0).epsilon(1e-12));
  CHECK(q.runtime.generation_seconds == doctest::Approx(10.0).epsilon(1e-12));
  CHECK(q.interpolated == false);  // filled during ingestion
  // FFN measured at 16 and 32 only; 64 is clamped to the b=32 value.
  const RuntimeQuery f = t.runtime(0, Subblock::kFfn, 0, 64);
  CHECK(f.runtime.prefill_seconds == 2.0);
  CHECK(rep.clamped >= 1);
  CHECK(rep.filled == 6);
  // Direct query between stored points interpolates.
  const RuntimeQuery g = t.runtime(0, Subblock::kAttention, 0, 24);
  CHECK(g.interpolated);
  CHECK(g.runtime.prefill_seconds == doctest::Approx(13.0).epsilon(1e-12));
  const RuntimeQuery h = t.runtime(0, Subblock::kAttention, 0, 1000);
  CHECK(h.clamped);
  CHECK(h.runtime.prefill_seconds == 33.0);
}

TEST_CASE("ingestion rejects malformed rows with diagnostics") {
  const SearchSpace space = OneLayerSpace();
  auto expect_error = [&](const std::string& text, const std::string& fragment) {
    try {
      IngestMeasurements(text, space);
      FAIL("expected rejection containing " << fragment);
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kSchema);
      CHECK_MESSAGE(std::string(e.what()).find(fragment) != std::string::npos, e.what());
    }
  };
  const std::string good = Rows("attn:noop", 1, 0, 0, 0, 0) +
                           Rows("ffn:r1.000", 1, 1, 1, 50, 0) +
                           Rows("ffn:noop", 1, 0, 0, 0, 0);
  expect_error(Header() + Rows("attn:gqa8", 1, -1, 1, 100, 16) + good, "row 2: negative");
  expect_error(Header() + "0,attn:gqa8,1,8,8,abc,1,100,16\n" + good, "row 2");
  expect_error(Header() + Rows("attn:gqa2", 1, 1, 1, 100, 16) + good, "attn:gqa2");
  expect_error(Header() + "0,attn:gqa8,1\n", "row 2");
  expect_error("layer,variant_id,batch\n0,attn:gqa8,1\n", "missing column");
  // Unknown columns are ignored with a warning.
  std::string extra = "note," + Header();
  for (const std::string& r : {Rows("attn:gqa8", 1, 1, 1, 100, 16), good}) {
    std::stringstream ss(r);
    std::string line;
    while (std::getline(ss, line)) extra += "x," + line + "\n";
  }
  IngestReport rep;
  CHECK_NOTHROW(IngestMeasurements(extra, space, &rep));
  REQUIRE(rep.warnings.size() == 1);
  CHECK(rep.warnings[0].find("note") != std::string::npos);
}

TEST_CASE("scenario and hardware profile round-trip through JSON") {
  Scenario s{3, 10, 20, 2.0};
  CHECK(Scenario::FromJson(s.ToJson()) == s);
  HardwareProfile hw;
  hw.launch_overhead_seconds = 1e-6;
  const HardwareProfile back = HardwareProfile::FromJson(hw.ToJson());
  CHECK(back.launch_overhead_seconds == hw.launch_overhead_seconds);
  CHECK(back.saturation_rows == hw.saturation_rows);
  CHECK_THROWS_AS(Scenario::FromJson({{"batch_size", 0}}), Error);
  CHECK_THROWS_AS(Scenario::FromJson({{"prefill_len", 0}, {"generation_len", 0}}), Error);
}
