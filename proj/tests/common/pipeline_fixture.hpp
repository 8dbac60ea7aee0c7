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

// Small end-to-end pipeline configuration shared by the pipeline tests and
// the acceptance binary.

#ifndef PUZZLE_TESTS_PIPELINE_FIXTURE_HPP_
#define PUZZLE_TESTS_PIPELINE_FIXTURE_HPP_

#include <cstdint>
#include <string>

#include "common/tiny_config.hpp"
#include "puzzle/pipeline.hpp"

namespace puzzle::testing {

inline PipelineConfig TinyPipelineConfig(std::uint64_t seed, const std::string& out) {
  return PipelineConfig::FromJson(TinyPipelineJson(seed, out));
}

}  // namespace puzzle::testing

#endif  // PUZZLE_TESTS_PIPELINE_FIXTURE_HPP_
