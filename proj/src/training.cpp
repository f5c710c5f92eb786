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

#include "modalign/training.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>
#include <random>
#include <set>

namespace modalign::training {

namespace {

void check_alpha(double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw TrainingError("alpha must lie in [0, 1], got " + std::to_string(alpha));
  }
}

void check_layers(std::span<const int> layers, int num_layer) {
  std::set<int> seen;
  for (int l : layers) {
    if (l < 0 || l > num_layer) {
      throw TrainingError("alignment layer " + std::to_string(l) + " outside [0, " +
                          std::to_string(num_layer) + "]");
    }
    if (!seen.insert(l).second) {
      throw TrainingError("alignment layer " + std::to_string(l) + " listed twice");
    }
  }
}

template <typename Scalar>
nn::Var<Scalar> source_span(const model::ForwardResult<Scalar>& fwd, int layer) {
  return nn::slice_rows(fwd.hidden[layer], fwd.spans.source.begin,
                        fwd.spans.source.size());
}

}  // namespace

double layer_weight(double alpha, std::size_t num_layers) {
  if (num_layers == 0) return 0.0;
  return (1.0 - alpha) / static_cast<double>(num_layers);
}

LossBreakdown combine_losses(double ce, const std::map<int, double>& wass,
                             double alpha) {
  check_alpha(alpha);
  LossBreakdown out;
  out.ce = ce;
  out.per_layer_wass = wass;
  out.alpha = alpha;
  out.total = alpha * ce;
  const double w = layer_weight(alpha, wass.size());
  for (const auto& [layer, value] : wass) out.total += w * value;
  return out;
}

std::vector<data::PairedSample> with_task(std::span<const data::PairedSample> samples,
                                          Task task, const model::ModelConfig& cfg) {
  std::vector<data::PairedSample> out(samples.begin(), samples.end());
  for (auto& s : out) {
    if (task == Task::kRecognition) {
      s.instruction = cfg.recognition_prompt;
      s.target = s.transcript;
    } else {
      s.instruction = cfg.translation_prompt;
    }
  }
  return out;
}

template <typename Scalar>
JointLoss<Scalar> joint_loss(nn::Tape<Scalar>& tape, ParameterStore<Scalar>& params,
                             const model::ModelConfig& cfg,
                             const data::PairedSample& sample,
                             std::span<const int> layers, double alpha,
                             const ot::SolverConfig& solver) {
  check_alpha(alpha);
  check_layers(layers, cfg.layers);

  const auto speech = model::forward(tape, params, cfg, sample, model::Modality::kSpeech);
  const auto ce = model::causal_lm_loss(speech.logits, speech.spans, sample.target,
                                        cfg.eos_id);
  std::vector<nn::Var<Scalar>> terms{ce};
  std::vector<Scalar> weights{static_cast<Scalar>(alpha)};
  std::map<int, double> wass;

  if (!layers.empty()) {
    const auto text = model::forward(tape, params, cfg, sample.instruction, sample,
                                     model::Modality::kText, {});
    const auto weight = static_cast<Scalar>(layer_weight(alpha, layers.size()));
    for (int l : layers) {
      const auto target = nn::stop_gradient(source_span(text, l));
      const auto term = nn::wasserstein(source_span(speech, l), target, solver);
      wass[l] = static_cast<double>(term.value()(0, 0));
      // A zero-weight term stays out of the graph so alpha = 1 reproduces
      // CE-only training bit for bit.
      if (weight != Scalar(0)) {
        terms.push_back(term);
        weights.push_back(weight);
      }
    }
  }

  JointLoss<Scalar> out{nn::weighted_sum<Scalar>(terms, weights), {}};
  out.breakdown = combine_losses(static_cast<double>(ce.value()(0, 0)), wass, alpha);
  return out;
}

template <typename Scalar>
nn::Var<Scalar> contrastive_baseline_loss(nn::Var<Scalar> speech_pooled,
                                          nn::Var<Scalar> text_pooled, Scalar scale) {
  if (speech_pooled.rows() < 2) {
    throw TrainingError("contrastive loss needs a batch of at least 2 pairs");
  }
  return nn::npair_loss(speech_pooled, text_pooled, scale);
}

template JointLoss<float> joint_loss(nn::Tape<float>&, ParameterStore<float>&,
                                     const model::ModelConfig&, const data::PairedSample&,
                                     std::span<const int>, double,
                                     const ot::SolverConfig&);
template JointLoss<double> joint_loss(nn::Tape<double>&, ParameterStore<double>&,
                                      const model::ModelConfig&,
                                      const data::PairedSample&, std::span<const int>,
                                      double, const ot::SolverConfig&);
template nn::Var<float> contrastive_baseline_loss(nn::Var<float>, nn::Var<float>, float);
template nn::Var<double> contrastive_baseline_loss(nn::Var<double>, nn::Var<double>,
                                                   double);

void validate(const TrainConfig& cfg, const model::ModelConfig& model) {
  check_alpha(cfg.alpha);
  check_layers(cfg.layers, model.layers);
  check_layers(cfg.monitor_layers, model.layers);
  if (cfg.batch_size < 1) throw TrainingError("batch_size must be >= 1");
  if (cfg.method == AlignMethod::kContrastive && cfg.batch_size < 2) {
    throw TrainingError("contrastive training needs batch_size >= 2");
  }
  if (cfg.steps < 0) throw TrainingError("steps must be >= 0");
  if (cfg.val_interval < 1) throw TrainingError("val_interval must be >= 1");
  if (cfg.patience < 1) throw TrainingError("patience must be >= 1");
  if (cfg.max_gen_len < 1) throw TrainingError("max_gen_len must be >= 1");
  if (!(cfg.contrastive_scale > 0.0)) {
    throw TrainingError("contrastive_scale must be positive");
  }
}

TaskMetrics score_generations(std::span<const data::TokenSequence> generated,
                              std::span<const data::TokenSequence> targets) {
  if (generated.size() != targets.size()) {
    throw TrainingError("generation and target counts differ");
  }
  TaskMetrics m;
  m.samples = targets.size();
  if (targets.empty()) return m;
  std::size_t correct = 0, positions = 0, exact = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto& g = generated[i];
    const auto& t = targets[i];
    for (std::size_t k = 0; k < t.size(); ++k) {
      if (k < g.size() && g[k] == t[k]) ++correct;
    }
    positions += t.size();
    if (g == t) ++exact;
  }
  m.token_acc = positions ? static_cast<double>(correct) / static_cast<double>(positions)
                          : 0.0;
  m.exact_match = static_cast<double>(exact) / static_cast<double>(targets.size());
  return m;
}

ValidationResult validate_model(const ParameterStore<float>& params,
                                const model::ModelConfig& cfg,
                                std::span<const data::PairedSample> samples,
                                const TrainConfig& train_cfg, model::Modality modality) {
  if (samples.empty()) throw TrainingError("validation split is empty");
  std::size_t n = samples.size();
  if (train_cfg.val_samples > 0) {
    n = std::min(n, static_cast<std::size_t>(train_cfg.val_samples));
  }
  std::set<int> measured(train_cfg.layers.begin(), train_cfg.layers.end());
  measured.insert(train_cfg.monitor_layers.begin(), train_cfg.monitor_layers.end());
  // Text against text has nothing to align.
  if (modality == model::Modality::kText) measured.clear();

  // Non-recording tapes only read parameter values.
  auto& store = const_cast<ParameterStore<float>&>(params);
  ValidationResult out;
  double ce = 0.0;
  std::map<int, double> wass;
  std::vector<data::TokenSequence> targets;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = samples[i];
    nn::Tape<float> tape(false);
    const auto fwd = model::forward(tape, store, cfg, s, modality);
    ce += model::causal_lm_loss(fwd.logits, fwd.spans, s.target, cfg.eos_id).value()(0, 0);
    if (!measured.empty()) {
      const auto text = model::forward(tape, store, cfg, s.instruction, s,
                                       model::Modality::kText, {});
      for (int l : measured) {
        wass[l] += ot::wasserstein_distance(source_span(fwd, l).value(),
                                            source_span(text, l).value(),
                                            train_cfg.solver);
      }
    }
    out.generated.push_back(model::generate(params, cfg, s, modality,
                                            train_cfg.max_gen_len));
    targets.push_back(s.target);
  }
  const auto count = static_cast<double>(n);
  for (auto& [l, v] : wass) v /= count;

  std::map<int, double> trained;
  for (int l : train_cfg.layers) {
    if (wass.count(l)) trained[l] = wass[l];
  }
  const TaskMetrics metrics = score_generations(out.generated, targets);
  out.record.split = "valid";
  out.record.ce = ce / count;
  out.record.wass = std::move(wass);
  out.record.total = combine_losses(out.record.ce, trained, train_cfg.alpha).total;
  out.record.token_acc = metrics.token_acc;
  out.record.exact_match = metrics.exact_match;
  return out;
}

TrainResult train(const ParameterStore<float>& init, const model::ModelConfig& cfg,
                  std::span<const data::PairedSample> train_set,
                  std::span<const data::PairedSample> valid_set,
                  const TrainConfig& tc, const TrainHooks& hooks) {
  model::validate(cfg);
  validate(tc, cfg);
  TrainResult result;
  result.best = init;
  result.last = init;
  if (tc.steps == 0) return result;
  if (train_set.empty()) throw TrainingError("training split is empty");
  if (valid_set.empty()) throw TrainingError("validation split is empty");

  ParameterStore<float>& params = result.last;
  nn::OptimizerState<float> opt;
  nn::EarlyStopping stopper(tc.patience);
  std::mt19937_64 rng(tc.seed);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();
  auto next_index = [&] {
    if (cursor == order.size()) {
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    return order[cursor++];
  };

  const std::vector<int> no_layers;
  const std::span<const int> aligned =
      tc.method == AlignMethod::kWasserstein ? std::span<const int>(tc.layers)
                                             : std::span<const int>(no_layers);
  const float inv_batch = 1.0f / static_cast<float>(tc.batch_size);

  // Running sums for the train record of the current interval.
  double sum_ce = 0.0, sum_total = 0.0;
  std::map<int, double> sum_wass;
  int interval_steps = 0;

  for (std::int64_t step = 0; step < tc.steps; ++step) {
    const double lr = nn::learning_rate(tc.schedule, opt.step);
    nn::Tape<float> tape;
    params.zero_grad();
    std::vector<nn::Var<float>> terms;
    std::vector<float> weights;
    std::vector<nn::Var<float>> speech_pooled, text_pooled;
    double batch_ce = 0.0, batch_total = 0.0;
    std::map<int, double> batch_wass;

    for (int b = 0; b < tc.batch_size; ++b) {
      const auto& s = train_set[next_index()];
      if (tc.method == AlignMethod::kWasserstein) {
        const auto jl = joint_loss(tape, params, cfg, s, aligned, tc.alpha, tc.solver);
        terms.push_back(jl.total);
        weights.push_back(inv_batch);
        batch_ce += jl.breakdown.ce;
        batch_total += jl.breakdown.total;
        for (const auto& [l, v] : jl.breakdown.per_layer_wass) batch_wass[l] += v;
      } else {
        const auto sp = model::forward(tape, params, cfg, s, model::Modality::kSpeech);
        const auto ce = model::causal_lm_loss(sp.logits, sp.spans, s.target, cfg.eos_id);
        const auto tx = model::forward(tape, params, cfg, s.instruction, s,
                                       model::Modality::kText, {});
        speech_pooled.push_back(nn::mean_rows(source_span(sp, 0)));
        text_pooled.push_back(nn::stop_gradient(nn::mean_rows(source_span(tx, 0))));
        terms.push_back(ce);
        weights.push_back(static_cast<float>(tc.alpha) * inv_batch);
        const double v = ce.value()(0, 0);
        batch_ce += v;
        batch_total += tc.alpha * v;
      }
    }
    if (tc.method == AlignMethod::kContrastive) {
      const auto cl = contrastive_baseline_loss(
          nn::concat_rows<float>(speech_pooled), nn::concat_rows<float>(text_pooled),
          static_cast<float>(tc.contrastive_scale));
      terms.push_back(cl);
      weights.push_back(static_cast<float>(1.0 - tc.alpha));
      batch_total += (1.0 - tc.alpha) * cl.value()(0, 0) * tc.batch_size;
    }
    const auto loss = nn::weighted_sum<float>(terms, weights);

    try {
      if (!loss.value().allFinite()) {
        throw nn::NumericsError("non-finite loss at step " + std::to_string(step));
      }
      tape.backward(loss);
      nn::optimizer_step(params, opt, tc.adam, tc.schedule);
    } catch (const nn::NumericsError& e) {
      if (hooks.on_abort) hooks.on_abort(params);
      throw TrainingError(std::string("training diverged: ") + e.what());
    }

    sum_ce += batch_ce / tc.batch_size;
    sum_total += batch_total / tc.batch_size;
    for (const auto& [l, v] : batch_wass) sum_wass[l] += v / tc.batch_size;
    ++interval_steps;
    result.steps_run = step + 1;

    const bool last = step + 1 == tc.steps;
    if ((step + 1) % tc.val_interval != 0 && !last) continue;

    MetricRecord train_rec;
    train_rec.step = step + 1;
    train_rec.split = "train";
    train_rec.ce = sum_ce / interval_steps;
    train_rec.total = sum_total / interval_steps;
    for (const auto& [l, v] : sum_wass) train_rec.wass[l] = v / interval_steps;
    train_rec.lr = lr;
    result.log.push_back(train_rec);
    if (hooks.on_record) hooks.on_record(train_rec);
    sum_ce = sum_total = 0.0;
    sum_wass.clear();
    interval_steps = 0;

    ValidationResult val =
        validate_model(params, cfg, valid_set, tc, model::Modality::kSpeech);
    val.record.step = step + 1;
    val.record.lr = lr;
    result.log.push_back(val.record);
    if (hooks.on_record) hooks.on_record(val.record);
    if (hooks.on_validation) hooks.on_validation(val.record, params);

    const bool stop = stopper.update(*val.record.token_acc);
    if (stopper.improved_last()) result.best = params;
    if (stop && tc.early_stop) {
      result.early_stopped = true;
      break;
    }
  }
  return result;
}

TrainResult pretrain_stage(const ParameterStore<float>& init,
                           const model::ModelConfig& cfg,
                           std::span<const data::PairedSample> train_set,
                           std::span<const data::PairedSample> valid_set,
                           TrainConfig train_cfg, const TrainHooks& hooks) {
  train_cfg.task = Task::kRecognition;
  train_cfg.method = AlignMethod::kWasserstein;
  train_cfg.layers.clear();
  train_cfg.alpha = 1.0;
  const auto tr = with_task(train_set, Task::kRecognition, cfg);
  const auto va = with_task(valid_set, Task::kRecognition, cfg);
  return train(init, cfg, tr, va, train_cfg, hooks);
}

TrainResult joint_train_stage(const ParameterStore<float>& init,
                              const model::ModelConfig& cfg,
                              std::span<const data::PairedSample> train_set,
                              std::span<const data::PairedSample> valid_set,
                              TrainConfig train_cfg, const TrainHooks& hooks) {
  train_cfg.task = Task::kTranslation;
  const auto tr = with_task(train_set, Task::kTranslation, cfg);
  const auto va = with_task(valid_set, Task::kTranslation, cfg);
  return train(init, cfg, tr, va, train_cfg, hooks);
}

std::string to_json_line(const MetricRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["split"] = r.split;
  j["ce"] = r.ce;
  nlohmann::ordered_json wass = nlohmann::ordered_json::object();
  for (const auto& [l, v] : r.wass) wass[std::to_string(l)] = v;
  j["wass"] = std::move(wass);
  j["total"] = r.total;
  j["token_acc"] = r.token_acc ? nlohmann::ordered_json(*r.token_acc) : nullptr;
  j["exact_match"] = r.exact_match ? nlohmann::ordered_json(*r.exact_match) : nullptr;
  j["lr"] = r.lr;
  return j.dump();
}

void write_metrics(std::ostream& out, std::span<const MetricRecord> log) {
  for (const auto& r : log) out << to_json_line(r) << '\n';
}

void write_metrics(const std::filesystem::path& path, std::span<const MetricRecord> log) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw TrainingError("cannot open " + path.string() + " for writing");
  write_metrics(out, log);
}

}  // namespace modalign::training
