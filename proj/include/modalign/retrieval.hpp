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

// Speech-to-text retrieval per layer and thresholded layer selection.
//
// For layer l, D(i, j) is the Wasserstein distance between the speech-span
// states of sample i and the transcript-span states of sample j. Each speech
// query ranks all transcripts by distance; the reciprocal rank of its own
// transcript, averaged over queries, is the layer's MRR. Layers whose MRR
// exceeds the threshold are selected for alignment.
//
// Report file: one JSON object per line,
//   {"layer": 0, "mrr": 0.93, "selected": true, "queries": 200}
// followed by a final line {"selection": [0, 1], "threshold": 0.05, "num_layer": 4}.

#include "modalign/model.hpp"
#include "modalign/ot.hpp"

#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

namespace modalign::retrieval {

using DistanceMatrix = Eigen::MatrixXd;

struct RetrievalReport {
  int layer = 0;
  double mrr = 0.0;
  // 1-based rank of the paired transcript for each query.
  std::vector<int> ranks;
};

struct LayerSelection {
  std::vector<int> layers;
  double threshold = 0.05;
  int num_layer = 0;
  // Set when nothing passed the threshold.
  bool empty = false;
};

class RetrievalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Source-span states of one sample at every layer (num_layer + 1 matrices),
// from a pass over [instruction ; source]. The response does not influence
// them under causal masking, so it is left out.
std::vector<Eigen::MatrixXf> source_span_states(const nn::ParameterStore<float>& params,
                                                const model::ModelConfig& cfg,
                                                const data::TokenSequence& instruction,
                                                const data::PairedSample& sample,
                                                model::Modality modality);

// states[i] is sample i's span at one layer. Entries are independent and may
// be filled by `threads` workers; each lands in its own slot.
template <typename Scalar>
DistanceMatrix pairwise_distance_matrix(std::span<const ot::Matrix<Scalar>> speech,
                                        std::span<const ot::Matrix<Scalar>> text,
                                        const ot::SolverConfig& solver,
                                        int threads = 1);

// Rank of the diagonal entry within its row: one plus the number of strictly
// smaller entries, so the golden match wins ties.
RetrievalReport mrr(const DistanceMatrix& distances);

// Selects { l : MRR(l) > threshold }. reports[k] must describe layer k.
LayerSelection select_layers(std::span<const RetrievalReport> reports,
                             double threshold);

// One report per layer 0..num_layer over `samples`.
std::vector<RetrievalReport> layerwise_retrieval(const nn::ParameterStore<float>& params,
                                                 const model::ModelConfig& cfg,
                                                 const data::TokenSequence& instruction,
                                                 std::span<const data::PairedSample> samples,
                                                 const ot::SolverConfig& solver,
                                                 int threads = 1);

// Same as layerwise_retrieval but for the given layers only.
std::vector<RetrievalReport> retrieval_at_layers(const nn::ParameterStore<float>& params,
                                                 const model::ModelConfig& cfg,
                                                 const data::TokenSequence& instruction,
                                                 std::span<const data::PairedSample> samples,
                                                 std::span<const int> layers,
                                                 const ot::SolverConfig& solver,
                                                 int threads = 1);

void write_report(std::ostream& out, std::span<const RetrievalReport> reports,
                  const LayerSelection& selection);
void write_report(const std::filesystem::path& path,
                  std::span<const RetrievalReport> reports,
                  const LayerSelection& selection);

// Reads the selection line of a report file.
LayerSelection read_selection(const std::filesystem::path& path);

}  // namespace modalign::retrieval
