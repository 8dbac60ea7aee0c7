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

#include "puzzle/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

namespace puzzle {

static_assert(std::endian::native == std::endian::little,
              "tensor container assumes a little-endian host");

using nlohmann::json;

void WriteTensorFile(const std::string& path, const TensorMap& tensors,
                     const json& metadata, DType dtype) {
  const std::size_t elem = dtype == DType::kF64 ? 8 : 4;
  json manifest = {{"format", "puzzle-tensors"},
                   {"version", 1},
                   {"metadata", metadata},
                   {"tensors", json::object()}};
  std::vector<char> payload;
  for (const auto& [name, m] : tensors) {
    const std::size_t offset = payload.size();
    const std::size_t nbytes = static_cast<std::size_t>(m.size()) * elem;
    payload.resize(offset + nbytes);
    char* dst = payload.data() + offset;
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        if (dtype == DType::kF64) {
          const double v = m(r, c);
          std::memcpy(dst, &v, 8);
        } else {
          const float v = static_cast<float>(m(r, c));
          std::memcpy(dst, &v, 4);
        }
        dst += elem;
      }
    }
    manifest["tensors"][name] = {{"dtype", dtype == DType::kF64 ? "f64" : "f32"},
                                 {"shape", {m.rows(), m.cols()}},
                                 {"offset", offset},
                                 {"nbytes", nbytes}};
  }
  const std::string header = manifest.dump();
  const std::uint64_t header_len = header.size();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  Require(out.good(), ErrorCode::kIo, "cannot write " + path);
  out.write(reinterpret_cast<const char*>(&header_len), 8);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  Require(out.good(), ErrorCode::kIo, "short write to " + path);
}

TensorFile ReadTensorFile(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  Require(in.good(), ErrorCode::kIo, "cannot open " + path);
  std::uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), 8);
  Require(in.good() && header_len < (1ULL << 32), ErrorCode::kSchema,
          path + ": bad container header");
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  std::vector<char> payload((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
  TensorFile file;
  try {
    const json manifest = json::parse(header);
    Require(manifest.value("format", "") == "puzzle-tensors", ErrorCode::kSchema,
            path + ": not a puzzle tensor container");
    file.metadata = manifest.value("metadata", json::object());
    for (const auto& [name, t] : manifest.at("tensors").items()) {
      const std::string dtype = t.at("dtype").get<std::string>();
      Require(dtype == "f64" || dtype == "f32", ErrorCode::kSchema,
              path + ": unsupported dtype " + dtype);
      const std::size_t elem = dtype == "f64" ? 8 : 4;
      const auto rows = t.at("shape").at(0).get<Eigen::Index>();
      const auto cols = t.at("shape").at(1).get<Eigen::Index>();
      const auto offset = t.at("offset").get<std::size_t>();
      const std::size_t nbytes = static_cast<std::size_t>(rows * cols) * elem;
      Require(offset + nbytes <= payload.size(), ErrorCode::kSchema,
              path + ": tensor '" + name + "' exceeds payload");
      Matrix m(rows, cols);
      const char* src = payload.data() + offset;
      for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index c = 0; c < cols; ++c) {
          if (elem == 8) {
            double v;
            std::memcpy(&v, src, 8);
            m(r, c) = v;
          } else {
            float v;
            std::memcpy(&v, src, 4);
            m(r, c) = v;
          }
          src += elem;
        }
      }
      file.tensors.emplace(name, std::move(m));
    }
  } catch (const json::exception& e) {
    Fail(ErrorCode::kSchema, path + ": " + e.what());
  }
  return file;
}

}  // namespace puzzle
