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

#include "puzzle/common.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <numbers>
#include <thread>
#include <vector>

namespace puzzle {

std::string Fnv1a::hex() const {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(state_));
  return buf;
}

std::string HexDigest(std::string_view bytes) {
  Fnv1a h;
  h.Update(bytes);
  return h.hex();
}

std::uint64_t MixSeed(std::uint64_t base, std::uint64_t salt) {
  // splitmix64 finalizer over the combined value.
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double NextUniform(Rng& rng) {
  // 53 random bits -> [0, 1).
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

void FillNormal(Matrix& m, double stddev, Rng& rng) {
  const Eigen::Index n = m.size();
  double* data = m.data();
  for (Eigen::Index i = 0; i < n; i += 2) {
    double u1 = NextUniform(rng);
    const double u2 = NextUniform(rng);
    if (u1 < 1e-300) u1 = 1e-300;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    data[i] = stddev * r * std::cos(theta);
    if (i + 1 < n) data[i + 1] = stddev * r * std::sin(theta);
  }
}

int UniformIndex(Rng& rng, int n) {
  Require(n > 0, ErrorCode::kInvalidArgument, "UniformIndex needs n > 0");
  return static_cast<int>(NextUniform(rng) * n);
}

void ParallelFor(int n, int workers, const std::function<void(int)>& fn) {
  if (n <= 0) return;
  workers = std::max(1, std::min(workers, n));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr first;
  std::mutex mu;
  auto worker = [&] {
    for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!first) first = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (first) std::rethrow_exception(first);
}

}  // namespace puzzle
