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

#ifndef PUZZLE_COMMON_HPP_
#define PUZZLE_COMMON_HPP_

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Dense>

namespace puzzle {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

// Error categories shared by the core and the C API status codes.
enum class ErrorCode {
  kInvalidArgument = 1,
  kOutOfRange = 2,
  kShapeMismatch = 3,
  kInfeasible = 4,
  kIo = 5,
  kSchema = 6,
  kNotFound = 7,
  kDegenerate = 8,
  kInternal = 9,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void Fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void Require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) Fail(code, message);
}

// 64-bit FNV-1a. Used for artifact fingerprints, so it must stay stable.
class Fnv1a {
 public:
  void Update(std::string_view bytes) {
    for (unsigned char c : bytes) {
      state_ ^= c;
      state_ *= 0x100000001b3ULL;
    }
  }
  void Update(const void* data, std::size_t size) {
    Update(std::string_view(static_cast<const char*>(data), size));
  }
  std::uint64_t digest() const { return state_; }
  std::string hex() const;

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::string HexDigest(std::string_view bytes);

// Derives an independent stream seed from a base seed and a salt.
std::uint64_t MixSeed(std::uint64_t base, std::uint64_t salt);

using Rng = std::mt19937_64;

// Fills a matrix with N(0, stddev^2) samples. Box-Muller over the raw
// engine output keeps draws identical across standard libraries.
void FillNormal(Matrix& m, double stddev, Rng& rng);
double NextUniform(Rng& rng);
// Uniform integer in [0, n).
int UniformIndex(Rng& rng, int n);

// Runs fn(0..n-1) on up to `workers` threads. Each index runs exactly once;
// the first exception thrown by any task is rethrown after all finish.
void ParallelFor(int n, int workers, const std::function<void(int)>& fn);

}  // namespace puzzle

#endif  // PUZZLE_COMMON_HPP_
