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

// Toy speech-text decoder: a window-level query-attention adapter turns
// acoustic frames into speech tokens, which are spliced between an
// instruction and the response and fed through a small pre-LN decoder-only
// transformer.
//
// Speech pass:  [instruction ; adapter(frames) ; response]
// Text pass:    [instruction ; transcript ; response]
//
// hidden[0] is the embedding-level sequence (token embeddings or projected
// adapter outputs, plus learned absolute positions); hidden[l] is the
// residual stream after block l.

#include "modalign/autograd.hpp"
#include "modalign/data.hpp"

#include <cstdint>
#include <vector>

namespace modalign::model {

using nn::Matrix;
using nn::ParameterStore;
using nn::Tape;
using nn::Var;

struct AdapterConfig {
  int window = 17;        // frames per window (L)
  int queries = 1;        // learned queries per window (N)
  int feature_dim = 16;   // acoustic dimension
  int heads = 4;
};

struct ModelConfig {
  int vocab_size = 67;  // 64 content tokens + pad, bos, eos
  int pad_id = 64;
  int bos_id = 65;
  int eos_id = 66;
  int dim = 64;
  int layers = 4;
  int heads = 4;
  int ffn_dim = 256;
  int max_positions = 64;
  // Token/position embeddings are drawn with this std; the adapter output
  // projection is scaled to match so both modalities start at the same norm.
  float embed_init_std = 0.3f;
  // Multiplier on the fan-in init of the attention output and second FFN
  // matrices, which write into the residual stream.
  float residual_init_scale = 0.1f;
  AdapterConfig adapter;
  // Fixed instruction templates, one per task.
  data::TokenSequence recognition_prompt = {65, 0, 1, 2};
  data::TokenSequence translation_prompt = {65, 3, 4, 5};
};

void validate(const ModelConfig& cfg);

enum class Modality { kSpeech, kText };

const char* to_string(Modality m);

struct Span {
  Eigen::Index begin = 0;
  Eigen::Index end = 0;
  Eigen::Index size() const { return end - begin; }
};

// Instruction, source (speech tokens or transcript) and response segments.
struct SpanMap {
  Span instruction;
  Span source;
  Span response;
  Eigen::Index length() const { return response.end; }
};

template <typename Scalar>
struct ForwardResult {
  Var<Scalar> logits;               // length x vocab
  std::vector<Var<Scalar>> hidden;  // layers + 1 entries, each length x dim
  SpanMap spans;
};

// Parameters drawn from a seeded normal; deterministic in (cfg, seed).
ParameterStore<float> init_parameters(const ModelConfig& cfg, std::uint64_t seed);

// Number of speech tokens the adapter emits for `frames` input frames.
Eigen::Index speech_token_count(const AdapterConfig& cfg, Eigen::Index frames);

// ceil(frames / window) * queries rows of model width.
template <typename Scalar>
Var<Scalar> window_adapter(Tape<Scalar>& tape, ParameterStore<Scalar>& params,
                           const ModelConfig& cfg,
                           const data::FeatureSequence& frames);

// Full pass over [instruction ; source ; response]. Throws on token ids
// outside the vocabulary or sequences longer than max_positions.
template <typename Scalar>
ForwardResult<Scalar> forward(Tape<Scalar>& tape, ParameterStore<Scalar>& params,
                              const ModelConfig& cfg,
                              const data::TokenSequence& instruction,
                              const data::PairedSample& sample, Modality modality,
                              const data::TokenSequence& response);

// Pass over sample.instruction + source + sample.target.
template <typename Scalar>
ForwardResult<Scalar> forward(Tape<Scalar>& tape, ParameterStore<Scalar>& params,
                              const ModelConfig& cfg,
                              const data::PairedSample& sample, Modality modality);

// Rows of the logits that predict the response and their labels: the last
// source position predicts response[0], ..., the last response position
// predicts eos.
struct LossTargets {
  std::vector<int> rows;
  std::vector<int> labels;
};

LossTargets response_targets(const SpanMap& spans,
                             const data::TokenSequence& response, int eos_id);

// Mean next-token negative log-likelihood over the response (plus eos).
template <typename Scalar>
Var<Scalar> causal_lm_loss(Var<Scalar> logits, const SpanMap& spans,
                           const data::TokenSequence& response, int eos_id);

// Greedy decoding from [instruction ; source] until eos or max_len tokens.
data::TokenSequence generate(const ParameterStore<float>& params,
                             const ModelConfig& cfg,
                             const data::PairedSample& sample, Modality modality,
                             int max_len);

}  // namespace modalign::model
