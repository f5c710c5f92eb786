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

#include "modalign/retrieval.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <thread>

namespace modalign::retrieval {

std::vector<Eigen::MatrixXf> source_span_states(const nn::ParameterStore<float>& params,
                                                const model::ModelConfig& cfg,
                                                const data::TokenSequence& instruction,
                                                const data::PairedSample& sample,
                                                model::Modality modality) {
  nn::Tape<float> tape(false);
  // A non-recording tape only reads parameter values.
  auto& store = const_cast<nn::ParameterStore<float>&>(params);
  const auto fwd = model::forward(tape, store, cfg, instruction, sample, modality, {});
  std::vector<Eigen::MatrixXf> out;
  out.reserve(fwd.hidden.size());
  for (const auto& h : fwd.hidden) {
    out.push_back(h.value().middleRows(fwd.spans.source.begin, fwd.spans.source.size()));
  }
  return out;
}

template <typename Scalar>
DistanceMatrix pairwise_distance_matrix(std::span<const ot::Matrix<Scalar>> speech,
                                        std::span<const ot::Matrix<Scalar>> text,
                                        const ot::SolverConfig& solver, int threads) {
  const auto q = static_cast<Eigen::Index>(speech.size());
  if (q == 0) throw RetrievalError("retrieval needs at least one pair");
  if (static_cast<Eigen::Index>(text.size()) != q) {
    throw RetrievalError("speech and text lists differ in length");
  }
  DistanceMatrix d(q, q);
  auto fill_rows = [&](Eigen::Index begin, Eigen::Index end) {
    for (Eigen::Index i = begin; i < end; ++i) {
      for (Eigen::Index j = 0; j < q; ++j) {
        d(i, j) = ot::wasserstein_distance(speech[i], text[j], solver);
      }
    }
  };
  threads = std::max(1, std::min<int>(threads, static_cast<int>(q)));
  if (threads == 1) {
    fill_rows(0, q);
    return d;
  }
  std::vector<std::thread> pool;
  const Eigen::Index chunk = (q + threads - 1) / threads;
  for (int t = 0; t < threads; ++t) {
    const Eigen::Index begin = t * chunk;
    const Eigen::Index end = std::min(q, begin + chunk);
    if (begin < end) pool.emplace_back(fill_rows, begin, end);
  }
  for (auto& th : pool) th.join();
  return d;
}

template DistanceMatrix pairwise_distance_matrix<float>(
    std::span<const ot::Matrix<float>>, std::span<const ot::Matrix<float>>,
    const ot::SolverConfig&, int);
template DistanceMatrix pairwise_distance_matrix<double>(
    std::span<const ot::Matrix<double>>, std::span<const ot::Matrix<double>>,
    const ot::SolverConfig&, int);

RetrievalReport mrr(const DistanceMatrix& distances) {
  const Eigen::Index q = distances.rows();
  if (q == 0 || distances.cols() != q) {
    throw RetrievalError("mrr needs a nonempty square matrix");
  }
  RetrievalReport report;
  double total = 0.0;
  for (Eigen::Index i = 0; i < q; ++i) {
    const double golden = distances(i, i);
    const auto smaller = (distances.row(i).array() < golden).count();
    const int rank = static_cast<int>(smaller) + 1;
    report.ranks.push_back(rank);
    total += 1.0 / rank;
  }
  report.mrr = total / static_cast<double>(q);
  return report;
}

LayerSelection select_layers(std::span<const RetrievalReport> reports,
                             double threshold) {
  if (reports.empty()) throw RetrievalError("select_layers needs at least one report");
  LayerSelection sel;
  sel.threshold = threshold;
  sel.num_layer = static_cast<int>(reports.size()) - 1;
  for (std::size_t l = 0; l < reports.size(); ++l) {
    if (reports[l].mrr > threshold) sel.layers.push_back(static_cast<int>(l));
  }
  sel.empty = sel.layers.empty();
  return sel;
}

std::vector<RetrievalReport> retrieval_at_layers(const nn::ParameterStore<float>& params,
                                                 const model::ModelConfig& cfg,
                                                 const data::TokenSequence& instruction,
                                                 std::span<const data::PairedSample> samples,
                                                 std::span<const int> layers,
                                                 const ot::SolverConfig& solver,
                                                 int threads) {
  if (samples.empty()) throw RetrievalError("retrieval needs at least one pair");
  for (int l : layers) {
    if (l < 0 || l > cfg.layers) {
      throw RetrievalError("layer " + std::to_string(l) + " outside [0, " +
                           std::to_string(cfg.layers) + "]");
    }
  }
  // per_layer[k][i]: span states of sample i at layers[k].
  std::vector<std::vector<Eigen::MatrixXf>> speech(layers.size()), text(layers.size());
  for (const auto& s : samples) {
    auto sp = source_span_states(params, cfg, instruction, s, model::Modality::kSpeech);
    auto tx = source_span_states(params, cfg, instruction, s, model::Modality::kText);
    for (std::size_t k = 0; k < layers.size(); ++k) {
      speech[k].push_back(std::move(sp[layers[k]]));
      text[k].push_back(std::move(tx[layers[k]]));
    }
  }
  std::vector<RetrievalReport> out;
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const DistanceMatrix d = pairwise_distance_matrix<float>(speech[k], text[k], solver, threads);
    RetrievalReport r = mrr(d);
    r.layer = layers[k];
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<RetrievalReport> layerwise_retrieval(const nn::ParameterStore<float>& params,
                                                 const model::ModelConfig& cfg,
                                                 const data::TokenSequence& instruction,
                                                 std::span<const data::PairedSample> samples,
                                                 const ot::SolverConfig& solver,
                                                 int threads) {
  std::vector<int> layers(cfg.layers + 1);
  for (int l = 0; l <= cfg.layers; ++l) layers[l] = l;
  return retrieval_at_layers(params, cfg, instruction, samples, layers, solver, threads);
}

void write_report(std::ostream& out, std::span<const RetrievalReport> reports,
                  const LayerSelection& selection) {
  for (const auto& r : reports) {
    const bool selected = std::find(selection.layers.begin(), selection.layers.end(),
                                    r.layer) != selection.layers.end();
    nlohmann::json j = {{"layer", r.layer},
                        {"mrr", r.mrr},
                        {"selected", selected},
                        {"queries", r.ranks.size()}};
    out << j.dump() << '\n';
  }
  nlohmann::json tail = {{"selection", selection.layers},
                         {"threshold", selection.threshold},
                         {"num_layer", selection.num_layer}};
  out << tail.dump() << '\n';
}

void write_report(const std::filesystem::path& path,
                  std::span<const RetrievalReport> reports,
                  const LayerSelection& selection) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw RetrievalError("cannot open " + path.string() + " for writing");
  write_report(out, reports, selection);
}

LayerSelection read_selection(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw RetrievalError("cannot open selection report " + path.string());
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw RetrievalError("malformed report line in " + path.string() + ": " + e.what());
    }
    if (!j.contains("selection")) continue;
    LayerSelection sel;
    sel.layers = j.at("selection").get<std::vector<int>>();
    sel.threshold = j.at("threshold").get<double>();
    sel.num_layer = j.at("num_layer").get<int>();
    sel.empty = sel.layers.empty();
    return sel;
  }
  throw RetrievalError("no selection record in " + path.string());
}

}  // namespace modalign::retrieval
