// Copyright 2026 The modalign Authors
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

#include "modalign/checkpoint.hpp"

#include "modalign/binary_io.hpp"

#include <fstream>
#include <limits>

namespace modalign::nn {

namespace {

constexpr std::uint32_t kMaxNameLen = 4096;
constexpr std::uint64_t kMaxTensorScalars = 1ull << 28;

}  // namespace

void save_checkpoint(const std::filesystem::path& path,
                     const ParameterStore<float>& params,
                     const std::string& metadata) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io::FormatError("cannot open " + path.string() + " for writing");
  out.write("MBCK", 4);
  io::write_u32(out, kCheckpointVersion);
  io::write_u32(out, static_cast<std::uint32_t>(metadata.size()));
  out.write(metadata.data(), static_cast<std::streamsize>(metadata.size()));
  io::write_u32(out, static_cast<std::uint32_t>(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = params.at(i);
    io::write_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    io::write_u32(out, static_cast<std::uint32_t>(e.value.rows()));
    io::write_u32(out, static_cast<std::uint32_t>(e.value.cols()));
    for (Eigen::Index r = 0; r < e.value.rows(); ++r) {
      for (Eigen::Index c = 0; c < e.value.cols(); ++c) io::write_f32(out, e.value(r, c));
    }
  }
  if (!out) throw io::FormatError("write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io::FormatError("cannot open checkpoint " + path.string());
  io::expect_magic(in, "MBCK");
  const std::uint32_t version = io::read_u32(in, "version");
  if (version != kCheckpointVersion) {
    throw io::FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  const std::uint32_t meta_len = io::read_u32(in, "metadata length");
  if (meta_len > (1u << 24)) throw io::FormatError("metadata length too large");
  ck.metadata.resize(meta_len);
  in.read(ck.metadata.data(), meta_len);
  if (static_cast<std::uint32_t>(in.gcount()) != meta_len) {
    throw io::FormatError("truncated file while reading metadata");
  }
  const std::uint32_t count = io::read_u32(in, "tensor count");
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::uint32_t name_len = io::read_u32(in, "name length");
    if (name_len == 0 || name_len > kMaxNameLen) {
      throw io::FormatError("invalid tensor name length");
    }
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (static_cast<std::uint32_t>(in.gcount()) != name_len) {
      throw io::FormatError("truncated file while reading tensor name");
    }
    const std::uint32_t rows = io::read_u32(in, "rows");
    const std::uint32_t cols = io::read_u32(in, "cols");
    if (static_cast<std::uint64_t>(rows) * cols > kMaxTensorScalars) {
      throw io::FormatError("tensor '" + name + "' shape overflow");
    }
    Matrix<float> value(rows, cols);
    for (std::uint32_t r = 0; r < rows; ++r) {
      for (std::uint32_t c = 0; c < cols; ++c) value(r, c) = io::read_f32(in, "tensor data");
    }
    ck.params.add(std::move(name), std::move(value));
  }
  return ck;
}

}  // namespace modalign::nn
