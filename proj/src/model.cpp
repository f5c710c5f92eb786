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

#include "modalign/model.hpp"

#include <cmath>
#include <random>
#include <string>

namespace modalign::model {

namespace {

std::string block_name(int layer, const char* part) {
  return "block" + std::to_string(layer) + "." + part;
}

void check_tokens(const ModelConfig& cfg, const data::TokenSequence& tokens,
                  const char* what) {
  for (int t : tokens) {
    if (t < 0 || t >= cfg.vocab_size) {
      throw nn::NumericsError(std::string("unknown token id ") + std::to_string(t) +
                              " in " + what);
    }
  }
}

template <typename Scalar>
Var<Scalar> linear(Tape<Scalar>& tape, ParameterStore<Scalar>& params, Var<Scalar> x,
                   const std::string& weight, const std::string& bias) {
  return add_row(matmul(x, tape.param(params, weight)), tape.param(params, bias));
}

}  // namespace

const char* to_string(Modality m) {
  return m == Modality::kSpeech ? "speech" : "text";
}

void validate(const ModelConfig& cfg) {
  auto fail = [](const std::string& msg) { throw nn::NumericsError("model config: " + msg); };
  if (cfg.vocab_size < 2) fail("vocab_size must be >= 2");
  for (int id : {cfg.pad_id, cfg.bos_id, cfg.eos_id}) {
    if (id < 0 || id >= cfg.vocab_size) fail("special token id outside vocabulary");
  }
  if (cfg.dim < 1 || cfg.heads < 1 || cfg.dim % cfg.heads != 0) {
    fail("dim must be a positive multiple of heads");
  }
  if (cfg.layers < 0) fail("layers must be >= 0");
  if (cfg.ffn_dim < 1) fail("ffn_dim must be >= 1");
  if (cfg.max_positions < 2) fail("max_positions must be >= 2");
  if (!(cfg.embed_init_std > 0.0f)) fail("embed_init_std must be positive");
  if (!(cfg.residual_init_scale > 0.0f)) fail("residual_init_scale must be positive");
  if (cfg.adapter.window < 1) fail("adapter window must be >= 1");
  if (cfg.adapter.queries < 1) fail("adapter queries must be >= 1");
  if (cfg.adapter.feature_dim < 1) fail("adapter feature_dim must be >= 1");
  if (cfg.adapter.heads < 1 || cfg.dim % cfg.adapter.heads != 0) {
    fail("dim must be a positive multiple of adapter heads");
  }
  check_tokens(cfg, cfg.recognition_prompt, "recognition prompt");
  check_tokens(cfg, cfg.translation_prompt, "translation prompt");
}

ParameterStore<float> init_parameters(const ModelConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> gauss(0.0f, 1.0f);
  ParameterStore<float> p;
  auto normal = [&](int rows, int cols, float std) {
    Matrix<float> m(rows, cols);
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) m(r, c) = std * gauss(rng);
    }
    return m;
  };
  auto weight = [&](int fan_in, int fan_out) {
    return normal(fan_in, fan_out, 1.0f / std::sqrt(static_cast<float>(fan_in)));
  };
  auto zeros = [](int cols) { return Matrix<float>::Zero(1, cols); };
  auto ones = [](int cols) { return Matrix<float>::Ones(1, cols); };

  const int d = cfg.dim;
  const auto& a = cfg.adapter;
  p.add("tok_emb", normal(cfg.vocab_size, d, cfg.embed_init_std));
  p.add("pos_emb", normal(cfg.max_positions, d, cfg.embed_init_std));

  p.add("adapter.in_w", weight(a.feature_dim, d));
  p.add("adapter.in_b", zeros(d));
  p.add("adapter.frame_pos", normal(a.window, d, 0.5f));
  p.add("adapter.query", normal(a.queries, d, 1.0f));
  p.add("adapter.key_w", weight(d, d));
  p.add("adapter.value_w", weight(d, d));
  p.add("adapter.proj_w", weight(d, d) * cfg.embed_init_std);
  p.add("adapter.proj_b", zeros(d));

  for (int l = 0; l < cfg.layers; ++l) {
    p.add(block_name(l, "ln1_g"), ones(d));
    p.add(block_name(l, "ln1_b"), zeros(d));
    p.add(block_name(l, "wq"), weight(d, d));
    p.add(block_name(l, "wk"), weight(d, d));
    p.add(block_name(l, "wv"), weight(d, d));
    p.add(block_name(l, "wo"), weight(d, d) * cfg.residual_init_scale);
    p.add(block_name(l, "bo"), zeros(d));
    p.add(block_name(l, "ln2_g"), ones(d));
    p.add(block_name(l, "ln2_b"), zeros(d));
    p.add(block_name(l, "fc1_w"), weight(d, cfg.ffn_dim));
    p.add(block_name(l, "fc1_b"), zeros(cfg.ffn_dim));
    p.add(block_name(l, "fc2_w"), weight(cfg.ffn_dim, d) * cfg.residual_init_scale);
    p.add(block_name(l, "fc2_b"), zeros(d));
  }
  p.add("lnf_g", ones(d));
  p.add("lnf_b", zeros(d));
  p.add("lm_head", weight(d, cfg.vocab_size));
  return p;
}

Eigen::Index speech_token_count(const AdapterConfig& cfg, Eigen::Index frames) {
  return ((frames + cfg.window - 1) / cfg.window) * cfg.queries;
}

template <typename Scalar>
Var<Scalar> window_adapter(Tape<Scalar>& tape, ParameterStore<Scalar>& params,
                           const ModelConfig& cfg,
                           const data::FeatureSequence& frames) {
  const auto& a = cfg.adapter;
  if (frames.rows() < 1) throw nn::NumericsError("window_adapter: no frames");
  if (frames.cols() != a.feature_dim) {
    throw nn::NumericsError("window_adapter: feature dim " +
                            std::to_string(frames.cols()) + " != " +
                            std::to_string(a.feature_dim));
  }
  if (!frames.allFinite()) throw nn::NumericsError("window_adapter: non-finite frames");
  std::vector<int> offset(frames.rows());
  for (Eigen::Index f = 0; f < frames.rows(); ++f) {
    offset[f] = static_cast<int>(f % a.window);
  }
  auto x = tape.constant(frames.template cast<Scalar>());
  auto h = linear(tape, params, x, "adapter.in_w", "adapter.in_b");
  h = gelu(add(h, gather_rows(tape.param(params, "adapter.frame_pos"),
                              std::span<const int>(offset))));
  auto keys = matmul(h, tape.param(params, "adapter.key_w"));
  auto values = matmul(h, tape.param(params, "adapter.value_w"));
  auto pooled = window_query_attention(tape.param(params, "adapter.query"), keys,
                                       values, a.window, a.heads);
  return linear(tape, params, pooled, "adapter.proj_w", "adapter.proj_b");
}

template <typename Scalar>
ForwardResult<Scalar> forward(Tape<Scalar>& tape, ParameterStore<Scalar>& params,
                              const ModelConfig& cfg,
                              const data::TokenSequence& instruction,
                              const data::PairedSample& sample, Modality modality,
                              const data::TokenSequence& response) {
  check_tokens(cfg, instruction, "instruction");
  check_tokens(cfg, response, "response");
  auto table = tape.param(params, "tok_emb");

  std::vector<Var<Scalar>> parts;
  if (!instruction.empty()) {
    parts.push_back(gather_rows(table, std::span<const int>(instruction)));
  }
  Var<Scalar> source;
  if (modality == Modality::kSpeech) {
    source = window_adapter(tape, params, cfg, sample.speech);
  } else {
    if (sample.transcript.empty()) throw nn::NumericsError("empty transcript");
    check_tokens(cfg, sample.transcript, "transcript");
    source = gather_rows(table, std::span<const int>(sample.transcript));
  }
  parts.push_back(source);
  if (!response.empty()) parts.push_back(gather_rows(table, std::span<const int>(response)));

  ForwardResult<Scalar> out;
  const auto ni = static_cast<Eigen::Index>(instruction.size());
  out.spans.instruction = {0, ni};
  out.spans.source = {ni, ni + source.rows()};
  out.spans.response = {out.spans.source.end,
                        out.spans.source.end + static_cast<Eigen::Index>(response.size())};
  const Eigen::Index length = out.spans.length();
  if (length > cfg.max_positions) {
    throw nn::NumericsError("sequence length " + std::to_string(length) +
                            " exceeds max_positions " +
                            std::to_string(cfg.max_positions));
  }

  auto x = add(concat_rows(std::span<const Var<Scalar>>(parts)),
               slice_rows(tape.param(params, "pos_emb"), 0, length));
  out.hidden.push_back(x);
  for (int l = 0; l < cfg.layers; ++l) {
    auto h = layer_norm(x, tape.param(params, block_name(l, "ln1_g")),
                        tape.param(params, block_name(l, "ln1_b")));
    auto q = matmul(h, tape.param(params, block_name(l, "wq")));
    auto k = matmul(h, tape.param(params, block_name(l, "wk")));
    auto v = matmul(h, tape.param(params, block_name(l, "wv")));
    auto att = causal_attention(q, k, v, cfg.heads);
    x = add(x, linear(tape, params, att, block_name(l, "wo"), block_name(l, "bo")));
    h = layer_norm(x, tape.param(params, block_name(l, "ln2_g")),
                   tape.param(params, block_name(l, "ln2_b")));
    h = gelu(linear(tape, params, h, block_name(l, "fc1_w"), block_name(l, "fc1_b")));
    x = add(x, linear(tape, params, h, block_name(l, "fc2_w"), block_name(l, "fc2_b")));
    out.hidden.push_back(x);
  }
  auto y = layer_norm(x, tape.param(params, "lnf_g"), tape.param(params, "lnf_b"));
  out.logits = matmul(y, tape.param(params, "lm_head"));
  return out;
}

template <typename Scalar>
ForwardResult<Scalar> forward(Tape<Scalar>& tape, ParameterStore<Scalar>& params,
                              const ModelConfig& cfg,
                              const data::PairedSample& sample, Modality modality) {
  return forward(tape, params, cfg, sample.instruction, sample, modality, sample.target);
}

LossTargets response_targets(const SpanMap& spans, const data::TokenSequence& response,
                             int eos_id) {
  if (spans.response.size() != static_cast<Eigen::Index>(response.size())) {
    throw nn::NumericsError("response does not match span map");
  }
  if (spans.response.begin < 1) {
    throw nn::NumericsError("response must be preceded by at least one position");
  }
  LossTargets t;
  for (std::size_t i = 0; i <= response.size(); ++i) {
    t.rows.push_back(static_cast<int>(spans.response.begin - 1 +
                                      static_cast<Eigen::Index>(i)));
    t.labels.push_back(i < response.size() ? response[i] : eos_id);
  }
  return t;
}

template <typename Scalar>
Var<Scalar> causal_lm_loss(Var<Scalar> logits, const SpanMap& spans,
                           const data::TokenSequence& response, int eos_id) {
  const LossTargets t = response_targets(spans, response, eos_id);
  return cross_entropy(logits, std::span<const int>(t.rows),
                       std::span<const int>(t.labels));
}

data::TokenSequence generate(const ParameterStore<float>& params,
                             const ModelConfig& cfg,
                             const data::PairedSample& sample, Modality modality,
                             int max_len) {
  data::TokenSequence out;
  // A non-recording tape only reads parameter values.
  auto& store = const_cast<ParameterStore<float>&>(params);
  for (int step = 0; step < max_len; ++step) {
    Tape<float> tape(false);
    const auto fwd = forward(tape, store, cfg, sample.instruction, sample, modality, out);
    Eigen::Index best = 0;
    fwd.logits.value().row(fwd.spans.length() - 1).maxCoeff(&best);
    if (static_cast<int>(best) == cfg.eos_id) break;
    out.push_back(static_cast<int>(best));
    if (fwd.spans.length() + 1 > cfg.max_positions) break;
  }
  return out;
}

#define MODALIGN_INSTANTIATE(S)                                                     \
  template Var<S> window_adapter(Tape<S>&, ParameterStore<S>&, const ModelConfig&,  \
                                 const data::FeatureSequence&);                     \
  template ForwardResult<S> forward(Tape<S>&, ParameterStore<S>&, const ModelConfig&, \
                                    const data::TokenSequence&,                     \
                                    const data::PairedSample&, Modality,            \
                                    const data::TokenSequence&);                    \
  template ForwardResult<S> forward(Tape<S>&, ParameterStore<S>&, const ModelConfig&, \
                                    const data::PairedSample&, Modality);           \
  template Var<S> causal_lm_loss(Var<S>, const SpanMap&, const data::TokenSequence&, \
                                 int);

MODALIGN_INSTANTIATE(float)
MODALIGN_INSTANTIATE(double)

#undef MODALIGN_INSTANTIATE

}  // namespace modalign::model
