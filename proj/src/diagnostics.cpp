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

#include "modalign/diagnostics.hpp"

#include "modalign/retrieval.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <fstream>
#include <sstream>

namespace modalign::diagnostics {

template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> pooled_representation(
    const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& states) {
  if (states.rows() == 0) throw DiagnosticsError("cannot pool an empty span");
  return states.colwise().mean().transpose();
}

template Eigen::VectorXf pooled_representation(const Eigen::MatrixXf&);
template Eigen::VectorXd pooled_representation(const Eigen::MatrixXd&);

AlignmentScore score_from_means(std::map<int, double> per_layer_mean,
                                std::size_t samples) {
  if (per_layer_mean.empty()) throw DiagnosticsError("alignment score needs a layer");
  AlignmentScore out;
  out.samples = samples;
  double mean = 0.0;
  for (const auto& [l, v] : per_layer_mean) mean += v;
  mean /= static_cast<double>(per_layer_mean.size());
  out.per_layer_mean = std::move(per_layer_mean);
  if (mean > 0.0) {
    out.log_score = std::log(mean);
  } else {
    out.log_score = -std::numeric_limits<double>::infinity();
    out.zero_distance = true;
  }
  return out;
}

AlignmentScore alignment_score(const nn::ParameterStore<float>& params,
                               const model::ModelConfig& cfg,
                               const data::TokenSequence& instruction,
                               std::span<const data::PairedSample> samples,
                               std::span<const int> layers,
                               const ot::SolverConfig& solver) {
  if (samples.empty()) throw DiagnosticsError("alignment score needs samples");
  if (layers.empty()) throw DiagnosticsError("alignment score needs a layer");
  for (int l : layers) {
    if (l < 0 || l > cfg.layers) {
      throw DiagnosticsError("layer " + std::to_string(l) + " outside [0, " +
                             std::to_string(cfg.layers) + "]");
    }
  }
  std::map<int, double> sums;
  for (const auto& s : samples) {
    const auto sp = retrieval::source_span_states(params, cfg, instruction, s,
                                                  model::Modality::kSpeech);
    const auto tx = retrieval::source_span_states(params, cfg, instruction, s,
                                                  model::Modality::kText);
    for (int l : layers) sums[l] += ot::wasserstein_distance(sp[l], tx[l], solver);
  }
  for (auto& [l, v] : sums) v /= static_cast<double>(samples.size());
  return score_from_means(std::move(sums), samples.size());
}

PooledSet pooled_representations(const nn::ParameterStore<float>& params,
                                 const model::ModelConfig& cfg,
                                 const data::TokenSequence& instruction,
                                 std::span<const data::PairedSample> samples, int layer) {
  if (layer < 0 || layer > cfg.layers) {
    throw DiagnosticsError("layer " + std::to_string(layer) + " outside [0, " +
                           std::to_string(cfg.layers) + "]");
  }
  PooledSet out;
  const auto q = static_cast<Eigen::Index>(samples.size());
  out.speech.resize(q, cfg.dim);
  out.text.resize(q, cfg.dim);
  for (Eigen::Index i = 0; i < q; ++i) {
    const auto& s = samples[i];
    out.ids.push_back(s.id);
    const auto sp = retrieval::source_span_states(params, cfg, instruction, s,
                                                  model::Modality::kSpeech);
    const auto tx = retrieval::source_span_states(params, cfg, instruction, s,
                                                  model::Modality::kText);
    out.speech.row(i) = pooled_representation<float>(sp[layer]).transpose();
    out.text.row(i) = pooled_representation<float>(tx[layer]).transpose();
  }
  return out;
}

Projection project_pca(const PooledSet& pooled) {
  const Eigen::Index q = pooled.speech.rows();
  if (q < 2 || pooled.text.rows() < 2) {
    throw DiagnosticsError("projection needs at least two vectors per modality");
  }
  if (pooled.text.rows() != q || static_cast<Eigen::Index>(pooled.ids.size()) != q ||
      pooled.text.cols() != pooled.speech.cols()) {
    throw DiagnosticsError("speech and text pooled sets do not match");
  }
  const Eigen::Index d = pooled.speech.cols();
  Eigen::MatrixXd all(2 * q, d);
  all << pooled.speech.cast<double>(), pooled.text.cast<double>();
  all.rowwise() -= all.colwise().mean();
  const Eigen::MatrixXd cov = all.transpose() * all / static_cast<double>(2 * q - 1);

  Projection out;
  if (d < 2) {
    out.degenerate = true;
    out.warning = "pooled vectors have fewer than two dimensions";
    return out;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) {
    throw DiagnosticsError("eigendecomposition of pooled covariance failed");
  }
  // Eigenvalues come in ascending order.
  const double top = eig.eigenvalues()(d - 1);
  const double second = eig.eigenvalues()(d - 2);
  if (!(top > 0.0) || second <= 1e-12 * top) {
    out.degenerate = true;
    out.warning = "pooled vectors span fewer than two directions; raw vectors only";
    return out;
  }
  Eigen::MatrixXd axes(d, 2);
  axes.col(0) = eig.eigenvectors().col(d - 1);
  axes.col(1) = eig.eigenvectors().col(d - 2);
  for (int k = 0; k < 2; ++k) {
    Eigen::Index arg = 0;
    axes.col(k).cwiseAbs().maxCoeff(&arg);
    if (axes(arg, k) < 0.0) axes.col(k) *= -1.0;
  }
  out.component_variance << top, second;
  const Eigen::MatrixXd coords = all * axes;
  for (Eigen::Index i = 0; i < 2 * q; ++i) {
    ProjectionPoint p;
    p.id = pooled.ids[i % q];
    p.modality = i < q ? model::Modality::kSpeech : model::Modality::kText;
    p.x = coords(i, 0);
    p.y = coords(i, 1);
    out.points.push_back(std::move(p));
  }
  return out;
}

void write_projection(const std::filesystem::path& path, const Projection& projection) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DiagnosticsError("cannot open " + path.string() + " for writing");
  out.precision(9);
  for (const auto& p : projection.points) {
    out << p.id << '\t' << model::to_string(p.modality) << '\t' << p.x << '\t' << p.y
        << '\n';
  }
}

ProjectionFiles projection_export(const PooledSet& pooled,
                                  const std::filesystem::path& prefix) {
  ProjectionFiles files;
  files.projection = project_pca(pooled);
  Eigen::MatrixXf raw(pooled.speech.rows() + pooled.text.rows(), pooled.speech.cols());
  raw << pooled.speech, pooled.text;
  files.vectors = prefix;
  files.vectors += ".mbft";
  data::write_feature_file(files.vectors, raw);
  if (!files.projection.degenerate) {
    files.coordinates = prefix;
    files.coordinates += ".tsv";
    write_projection(files.coordinates, files.projection);
  }
  return files;
}

GenerationEval generation_eval(const nn::ParameterStore<float>& params,
                               const model::ModelConfig& cfg,
                               std::span<const data::PairedSample> samples,
                               model::Modality modality, int max_len) {
  GenerationEval out;
  for (const auto& s : samples) {
    out.ids.push_back(s.id);
    out.generated.push_back(model::generate(params, cfg, s, modality, max_len));
    out.targets.push_back(s.target);
  }
  out.metrics = training::score_generations(out.generated, out.targets);
  return out;
}

GenerationEval zero_shot_text_eval(const nn::ParameterStore<float>& params,
                                   const model::ModelConfig& cfg,
                                   std::span<const data::PairedSample> samples,
                                   int max_len) {
  const auto prompted = training::with_task(samples, training::Task::kTranslation, cfg);
  return generation_eval(params, cfg, prompted, model::Modality::kText, max_len);
}

void write_generations(const std::filesystem::path& path, const GenerationEval& eval) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DiagnosticsError("cannot open " + path.string() + " for writing");
  for (std::size_t i = 0; i < eval.ids.size(); ++i) {
    out << eval.ids[i] << '\t' << data::format_tokens(eval.generated[i]) << '\t'
        << data::format_tokens(eval.targets[i]) << '\n';
  }
}

GenerationEval read_generations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DiagnosticsError("cannot open generation dump " + path.string());
  GenerationEval out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, '\t')) fields.push_back(f);
    // An empty generation leaves a trailing empty field that getline drops.
    if (fields.size() == 2 && line.back() == '\t') fields.emplace_back();
    if (fields.size() != 3) {
      throw DiagnosticsError(path.string() + ":" + std::to_string(lineno) +
                             ": expected 3 tab-separated fields");
    }
    out.ids.push_back(fields[0]);
    out.generated.push_back(data::parse_tokens(fields[1]));
    out.targets.push_back(data::parse_tokens(fields[2]));
  }
  out.metrics = training::score_generations(out.generated, out.targets);
  return out;
}

}  // namespace modalign::diagnostics
