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

// Flat binary tensor container:
//   u64 little-endian manifest length | JSON manifest | tensor bytes
// The manifest maps tensor name -> {dtype, shape, offset, nbytes}; offsets
// are relative to the first byte after the manifest. Data is row-major.

#ifndef PUZZLE_TENSOR_IO_HPP_
#define PUZZLE_TENSOR_IO_HPP_

#include <map>
#include <string>

#include "json.hpp"
#include "puzzle/common.hpp"

namespace puzzle {

enum class DType { kF64, kF32 };

using TensorMap = std::map<std::string, Matrix>;

struct TensorFile {
  nlohmann::json metadata = nlohmann::json::object();
  TensorMap tensors;
};

void WriteTensorFile(const std::string& path, const TensorMap& tensors,
                     const nlohmann::json& metadata, DType dtype = DType::kF64);
TensorFile ReadTensorFile(const std::string& path);

}  // namespace puzzle

#endif  // PUZZLE_TENSOR_IO_HPP_
