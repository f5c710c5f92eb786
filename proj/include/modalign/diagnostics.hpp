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

// Modality-gap measurements on a frozen model. Nothing here writes to the
// parameter store.
//
// Projection file: one record per line, tab-separated,
//   id <TAB> modality ("speech" | "text") <TAB> x <TAB> y
// Pooled vectors go to a feature file (2Q x dim): speech rows for samples
// 0..Q-1, then text rows in the same sample order.

#include "modalign/data.hpp"
#include "modalign/model.hpp"
#include "modalign/ot.hpp"
#include "modalign/training.hpp"

#include <filesystem>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace modalign::diagnostics {

class DiagnosticsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Mean over rows. Throws on an empty span.
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> pooled_representation(
    const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& states);

struct AlignmentScore {
  std::map<int, double> per_layer_mean;
  // ln(mean of per_layer_mean); -infinity when that mean is zero.
  double log_score = -std::numeric_limits<double>::infinity();
  bool zero_distance = false;
  std::size_t samples = 0;
};

// Applies the log to the mean of the given per-layer means.
AlignmentScore score_from_means(std::map<int, double> per_layer_mean,
                                std::size_t samples);

// Per layer: mean Wasserstein between speech-span and transcript-span states
// over `samples`, both passes prefixed by `instruction`.
AlignmentScore alignment_score(const nn::ParameterStore<float>& params,
                               const model::ModelConfig& cfg,
                               const data::TokenSequence& instruction,
                               std::span<const data::PairedSample> samples,
                               std::span<const int> layers,
                               const ot::SolverConfig& solver);

struct PooledSet {
  std::vector<std::string> ids;
  Eigen::MatrixXf speech;  // Q x dim
  Eigen::MatrixXf text;    // Q x dim
};

PooledSet pooled_representations(const nn::ParameterStore<float>& params,
                                 const model::ModelConfig& cfg,
                                 const data::TokenSequence& instruction,
                                 std::span<const data::PairedSample> samples, int layer);

struct ProjectionPoint {
  std::string id;
  model::Modality modality = model::Modality::kSpeech;
  double x = 0.0;
  double y = 0.0;
};

struct Projection {
  std::vector<ProjectionPoint> points;
  // Variance along the two components, largest first.
  Eigen::Vector2d component_variance = Eigen::Vector2d::Zero();
  // Set when the pooled set spans fewer than two directions; points is then
  // empty.
  bool degenerate = false;
  std::string warning;
};

// PCA onto the top two components of both modalities, centered jointly.
// Each axis is signed so its largest-magnitude loading is positive. Needs at
// least two vectors per modality.
Projection project_pca(const PooledSet& pooled);

void write_projection(const std::filesystem::path& path, const Projection& projection);

struct ProjectionFiles {
  Projection projection;
  std::filesystem::path coordinates;  // empty when degenerate
  std::filesystem::path vectors;
};

// Writes <prefix>.tsv (unless degenerate) and <prefix>.mbft.
ProjectionFiles projection_export(const PooledSet& pooled,
                                  const std::filesystem::path& prefix);

struct GenerationEval {
  training::TaskMetrics metrics;
  std::vector<std::string> ids;
  std::vector<data::TokenSequence> generated;
  std::vector<data::TokenSequence> targets;
};

// Greedy generation in `modality` on samples that already carry the prompt
// and target; the text modality is the zero-shot transfer probe.
GenerationEval generation_eval(const nn::ParameterStore<float>& params,
                               const model::ModelConfig& cfg,
                               std::span<const data::PairedSample> samples,
                               model::Modality modality, int max_len);

// Text-modality generation with the translation prompt used in training.
GenerationEval zero_shot_text_eval(const nn::ParameterStore<float>& params,
                                   const model::ModelConfig& cfg,
                                   std::span<const data::PairedSample> samples,
                                   int max_len);

// Dump: id <TAB> generated ids <TAB> target ids, one sample per line.
void write_generations(const std::filesystem::path& path, const GenerationEval& eval);
GenerationEval read_generations(const std::filesystem::path& path);

}  // namespace modalign::diagnostics
