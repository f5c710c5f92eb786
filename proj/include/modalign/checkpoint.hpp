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

#pragma once

// Checkpoint file, version 1. All integers are little-endian u32.
//
//   magic     "MBCK"
//   version   1
//   meta_len  byte length of the metadata string that follows
//   meta      UTF-8 text (the CLI stores the model config as JSON)
//   count     number of tensors
//   count times:
//     name_len, name bytes, rows, cols,
//     rows*cols little-endian float32 values, row-major
//
// Tensors appear in ParameterStore insertion order.

#include "modalign/autograd.hpp"

#include <filesystem>
#include <string>

namespace modalign::nn {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string metadata;
  ParameterStore<float> params;
};

void save_checkpoint(const std::filesystem::path& path,
                     const ParameterStore<float>& params,
                     const std::string& metadata = {});

Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace modalign::nn
