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

// Run configuration read from a JSON file. Every section and key is optional;
// missing keys take the defaults below and unknown keys are rejected. The
// fully resolved configuration is what `to_json` returns and what the CLI
// writes to <out>/config.json.
//
// {
//   "data_seed": 7,            corpus synthesis
//   "init_seed": 11,           model initialization
//   "data":    { "vocab_size": 64, "min_tokens": 4, "max_tokens": 16,
//                "min_frames_per_token": 12, "max_frames_per_token": 22,
//                "feature_dim": 16, "noise": 0.1, "size": 2000,
//                "valid_fraction": 0.1, "test_fraction": 0.1 },
//   "model":   { "dim": 64, "layers": 4, "heads": 4, "ffn_dim": 256,
//                "max_positions": 64, "embed_init_std": 0.3,
//                "residual_init_scale": 0.1 },
//   "adapter": { "window": 17, "queries": 1, "heads": 4 },
//   "solver":  { "method": "sinkhorn" | "exact" | "auto", "epsilon_scale": 0.01,
//                "epsilon": null, "max_iters": 500, "tol": 1e-6 },
//   "pretrain": <stage>,
//   "joint":    <stage> plus { "alpha": 0.99, "method": "wasserstein" | "contrastive",
//                               "contrastive_scale": 10.0 },
//   "selection": { "threshold": 0.05, "queries": 200, "split": "valid" },
//   "eval":      { "samples": 200, "split": "test", "max_gen_len": 20 }
// }
//
// <stage> = { "steps": 2000, "batch_size": 16, "val_interval": 200,
//             "val_samples": 100, "patience": 4, "early_stop": true, "seed": 1,
//             "max_gen_len": 20,
//             "schedule": { "warmup_start": 2e-5, "peak": 2e-3, "floor": 2e-4,
//                           "warmup_steps": 200, "total_steps": 2000 },
//             "adam": { "beta1": 0.9, "beta2": 0.999, "eps": 1e-8,
//                       "weight_decay": 0.05, "grad_clip": 1.0 } }
//
// The model vocabulary is the data vocabulary plus pad, bos and eos, in that
// order, and the adapter's feature dimension follows data.feature_dim.

#include "modalign/data.hpp"
#include "modalign/model.hpp"
#include "modalign/ot.hpp"
#include "modalign/training.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace modalign::config {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SelectionConfig {
  double threshold = 0.05;
  int queries = 200;
  std::string split = "valid";
};

struct EvalConfig {
  int samples = 200;
  std::string split = "test";
  int max_gen_len = 20;
};

struct RunConfig {
  std::uint64_t data_seed = 7;
  std::uint64_t init_seed = 11;
  data::SynthConfig data;
  model::ModelConfig model;
  ot::SolverConfig solver;
  training::TrainConfig pretrain;
  training::TrainConfig joint;
  SelectionConfig selection;
  EvalConfig eval;
};

// Stage defaults used at desk scale. The optimizer schedule constants in
// nn::ScheduleConfig describe a much longer run and are overridden here.
training::TrainConfig default_stage();
RunConfig default_config();

// Throws ConfigError naming the offending key path.
RunConfig from_json(const nlohmann::json& j);
nlohmann::ordered_json to_json(const RunConfig& cfg);
RunConfig load_config(const std::filesystem::path& path);
void write_config(const std::filesystem::path& path, const RunConfig& cfg);

// Model architecture as stored in checkpoint metadata.
nlohmann::ordered_json model_to_json(const model::ModelConfig& cfg);
model::ModelConfig model_from_json(const nlohmann::json& j);

ot::Method parse_method(const std::string& name);
std::string method_name(ot::Method m);

// Alignment layer set given on the command line: "auto" (use the selection
// report), a single index "1", an inclusive range "0..3", or a comma list of
// those ("0,2..3"). Layers come back sorted and deduplicated.
struct LayerSpec {
  bool automatic = false;
  std::vector<int> layers;
};

LayerSpec parse_layer_spec(const std::string& text);

// Checks every layer against [0, num_layer].
void check_layer_range(const std::vector<int>& layers, int num_layer);

// Worker threads for parallel distance computations, from MODALIGN_THREADS
// (default 1). Throws on a non-positive or malformed value.
int thread_count_from_env();

// Exclusive lock on a run directory, held for the object's lifetime. The
// directory is created if needed; an existing lock file is an error.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

  static constexpr const char* kFileName = ".modalign.lock";

 private:
  std::filesystem::path file_;
};

struct ModelCheckpoint {
  model::ModelConfig config;
  nn::ParameterStore<float> params;
  std::string stage;
  std::int64_t step = 0;
};

// Metadata records the architecture, the producing stage and the step.
void save_model_checkpoint(const std::filesystem::path& path,
                           const model::ModelConfig& cfg,
                           const nn::ParameterStore<float>& params,
                           const std::string& stage, std::int64_t step);

// Throws when the metadata is not a model description or the tensors do not
// match the architecture it describes.
ModelCheckpoint load_model_checkpoint(const std::filesystem::path& path);

}  // namespace modalign::config
