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

// Stage 1 (speech pretraining on recognition) and stage 3 (translation with a
// joint cross-entropy + per-layer Wasserstein objective).
//
// Joint objective for one sample, selected layers I and weight alpha:
//   total = alpha * CE + sum_{l in I} (1 - alpha) / |I| * W_l
// where W_l is the Wasserstein distance between the speech-span states of the
// speech pass and the transcript-span states of the text pass at layer l.
// The text pass shares parameters but is gradient-stopped.
//
// Metrics log: one JSON object per line,
//   {"step": 200, "split": "valid", "ce": 1.2, "wass": {"0": 3.1}, "total": 1.22,
//    "token_acc": 0.81, "exact_match": 0.4, "lr": 3e-4}
// "token_acc" and "exact_match" are null on train records.

#include "modalign/data.hpp"
#include "modalign/model.hpp"
#include "modalign/optim.hpp"
#include "modalign/ot.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace modalign::training {

using nn::ParameterStore;

struct LossBreakdown {
  double ce = 0.0;
  std::map<int, double> per_layer_wass;
  double alpha = 1.0;
  double total = 0.0;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Weight of each alignment term: (1 - alpha) / |I|; zero when I is empty.
double layer_weight(double alpha, std::size_t num_layers);

// The combined objective evaluated on plain numbers.
LossBreakdown combine_losses(double ce, const std::map<int, double>& wass, double alpha);

enum class Task { kRecognition, kTranslation };

enum class AlignMethod {
  kWasserstein,
  // N-pair loss on mean-pooled embedding-layer states; the layer set is
  // ignored and the single term gets weight (1 - alpha).
  kContrastive,
};

// Sets the task prompt; recognition targets are the transcript itself.
std::vector<data::PairedSample> with_task(std::span<const data::PairedSample> samples,
                                          Task task, const model::ModelConfig& cfg);

template <typename Scalar>
struct JointLoss {
  nn::Var<Scalar> total;
  LossBreakdown breakdown;
};

// Speech pass with CE on the response, plus a text pass over
// [instruction ; transcript] for every selected layer. Throws when a layer is
// outside [0, cfg.layers] or alpha is outside [0, 1].
template <typename Scalar>
JointLoss<Scalar> joint_loss(nn::Tape<Scalar>& tape, ParameterStore<Scalar>& params,
                             const model::ModelConfig& cfg,
                             const data::PairedSample& sample,
                             std::span<const int> layers, double alpha,
                             const ot::SolverConfig& solver);

// Multi-class N-pair loss between pooled speech and pooled text vectors
// (rows). Throws for a batch smaller than 2.
template <typename Scalar>
nn::Var<Scalar> contrastive_baseline_loss(nn::Var<Scalar> speech_pooled,
                                          nn::Var<Scalar> text_pooled,
                                          Scalar scale = Scalar(10));

struct TrainConfig {
  Task task = Task::kTranslation;
  AlignMethod method = AlignMethod::kWasserstein;
  double alpha = 0.99;
  std::vector<int> layers;
  // Extra layers whose Wasserstein is logged at validation but not trained.
  std::vector<int> monitor_layers;
  int batch_size = 8;
  std::int64_t steps = 2000;
  int val_interval = 200;
  int patience = 4;
  bool early_stop = true;
  std::uint64_t seed = 1;
  // Validation uses at most this many samples from the front of the split.
  int val_samples = 100;
  int max_gen_len = 20;
  double contrastive_scale = 10.0;
  ot::SolverConfig solver;
  nn::ScheduleConfig schedule;
  nn::AdamWConfig adam;
};

void validate(const TrainConfig& cfg, const model::ModelConfig& model);

struct MetricRecord {
  std::int64_t step = 0;
  std::string split;
  double ce = 0.0;
  std::map<int, double> wass;
  double total = 0.0;
  std::optional<double> token_acc;
  std::optional<double> exact_match;
  double lr = 0.0;
};

struct TrainResult {
  // Parameters at the best validation token accuracy.
  ParameterStore<float> best;
  ParameterStore<float> last;
  std::vector<MetricRecord> log;
  std::int64_t steps_run = 0;
  bool early_stopped = false;
};

struct TrainHooks {
  // Called for every metrics record as soon as it is produced.
  std::function<void(const MetricRecord&)> on_record;
  // Called after every validation with the current parameters.
  std::function<void(const MetricRecord&, const ParameterStore<float>&)> on_validation;
  // Called with the last finite parameters before a non-finite loss aborts
  // the run.
  std::function<void(const ParameterStore<float>&)> on_abort;
};

// Task metrics from greedy generation. token_acc counts positions where the
// generated token equals the target (missing tokens count as wrong) over
// target length; exact_match requires identical sequences.
struct TaskMetrics {
  double token_acc = 0.0;
  double exact_match = 0.0;
  std::size_t samples = 0;
};

TaskMetrics score_generations(std::span<const data::TokenSequence> generated,
                              std::span<const data::TokenSequence> targets);

struct ValidationResult {
  MetricRecord record;
  std::vector<data::TokenSequence> generated;
};

// CE, per-layer Wasserstein and generation metrics on `samples` (already
// carrying the task prompt).
ValidationResult validate_model(const ParameterStore<float>& params,
                                const model::ModelConfig& cfg,
                                std::span<const data::PairedSample> samples,
                                const TrainConfig& train_cfg, model::Modality modality);

// The training loop shared by both stages. Samples must already carry the
// task prompt and target (see with_task).
TrainResult train(const ParameterStore<float>& init, const model::ModelConfig& cfg,
                  std::span<const data::PairedSample> train_set,
                  std::span<const data::PairedSample> valid_set,
                  const TrainConfig& train_cfg, const TrainHooks& hooks = {});

// Recognition, CE only. Applies the recognition prompt to both splits and
// ignores train_cfg.layers and alpha.
TrainResult pretrain_stage(const ParameterStore<float>& init,
                           const model::ModelConfig& cfg,
                           std::span<const data::PairedSample> train_set,
                           std::span<const data::PairedSample> valid_set,
                           TrainConfig train_cfg, const TrainHooks& hooks = {});

// Translation with the joint objective over train_cfg.layers. Applies the
// translation prompt to both splits.
TrainResult joint_train_stage(const ParameterStore<float>& init,
                              const model::ModelConfig& cfg,
                              std::span<const data::PairedSample> train_set,
                              std::span<const data::PairedSample> valid_set,
                              TrainConfig train_cfg, const TrainHooks& hooks = {});

std::string to_json_line(const MetricRecord& record);
void write_metrics(std::ostream& out, std::span<const MetricRecord> log);
void write_metrics(const std::filesystem::path& path, std::span<const MetricRecord> log);

}  // namespace modalign::training
