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

// Acceptance checks. Prints one line per criterion:
//   criterion <N>: PASS|FAIL <details>
// Usage: modalign_acceptance [N ...]   (no arguments runs all nine)
// Exit status is non-zero when any selected criterion fails.

#include "modalign/config.hpp"
#include "modalign/diagnostics.hpp"
#include "modalign/retrieval.hpp"
#include "modalign/training.hpp"

#include "test_support.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>

using namespace modalign;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

// Tolerances and budgets.
constexpr double kOracleTol = 1e-9;
constexpr double kOracleSeconds = 5.0;
constexpr double kSinkhornRelTol = 0.05;
constexpr double kMarginalTol = 1e-6;
constexpr double kFdStep = 1e-4;
constexpr double kFdRelTol = 1e-3;
constexpr int kFdMinCoords = 100;
constexpr double kMonteCarloTol = 0.002;
constexpr double kWassReduction = 0.30;
constexpr double kExactMatchSlack = 0.01;
constexpr double kPipelineSeconds = 15.0 * 60.0;

double seconds_since(Clock::time_point t) {
  return std::chrono::duration<double>(Clock::now() - t).count();
}

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

// ---------------------------------------------------------------------------
// Shared fixtures

struct OtInstance {
  Eigen::MatrixXd cost;
  bool square = true;
};

std::vector<OtInstance> ot_instances() {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> size(1, 6);
  std::uniform_int_distribution<int> small(1, 5);
  std::uniform_int_distribution<int> dim(1, 4);
  std::vector<OtInstance> out;
  for (int t = 0; t < 50; ++t) {
    const int n = size(rng);
    const int d = dim(rng);
    const auto hs = testing::random_matrix(rng, n, d);
    const auto ht = testing::random_matrix(rng, n, d);
    out.push_back({ot::squared_euclidean_cost(hs, ht), true});
  }
  while (out.size() < 100) {
    const int n = small(rng);
    const int m = small(rng);
    if (n == m) continue;
    const int d = dim(rng);
    const auto hs = testing::random_matrix(rng, n, d);
    const auto ht = testing::random_matrix(rng, m, d);
    out.push_back({ot::squared_euclidean_cost(hs, ht), false});
  }
  return out;
}

model::ModelConfig small_model() {
  model::ModelConfig cfg;
  cfg.vocab_size = 11;
  cfg.pad_id = 8;
  cfg.bos_id = 9;
  cfg.eos_id = 10;
  cfg.dim = 8;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.ffn_dim = 12;
  cfg.max_positions = 40;
  cfg.adapter.window = 4;
  cfg.adapter.feature_dim = 3;
  cfg.adapter.heads = 2;
  cfg.recognition_prompt = {9, 0};
  cfg.translation_prompt = {9, 1};
  return cfg;
}

data::SyntheticCorpus small_corpus() {
  data::SynthConfig sc;
  sc.vocab_size = 8;
  sc.min_tokens = 2;
  sc.max_tokens = 4;
  sc.min_frames_per_token = 3;
  sc.max_frames_per_token = 5;
  sc.feature_dim = 3;
  sc.size = 40;
  sc.valid_fraction = 0.2;
  sc.test_fraction = 0.1;
  return data::synthesize_corpus(21, sc);
}

nn::ParameterStore<double> jittered(const model::ModelConfig& cfg, std::uint64_t seed) {
  auto p = model::init_parameters(cfg, seed).cast<double>();
  std::mt19937_64 rng(seed + 7);
  std::normal_distribution<double> nd(0.0, 0.1);
  for (std::size_t i = 0; i < p.size(); ++i) {
    auto& v = p.at(i).value;
    for (Eigen::Index k = 0; k < v.size(); ++k) v.data()[k] += nd(rng);
  }
  return p;
}

ot::SolverConfig exact_solver() {
  ot::SolverConfig s;
  s.method = ot::Method::kExact;
  return s;
}

std::vector<Eigen::MatrixXd> frozen_text_states(nn::ParameterStore<double>& p,
                                                const model::ModelConfig& cfg,
                                                const data::PairedSample& s) {
  nn::Tape<double> tape(false);
  const auto text = model::forward(tape, p, cfg, s.instruction, s, model::Modality::kText, {});
  std::vector<Eigen::MatrixXd> out;
  for (const auto& h : text.hidden) {
    out.push_back(h.value().middleRows(text.spans.source.begin, text.spans.source.size()));
  }
  return out;
}

// Joint objective with the text side supplied as constants.
nn::Var<double> detached_joint(nn::Tape<double>& tape, nn::ParameterStore<double>& p,
                               const model::ModelConfig& cfg, const data::PairedSample& s,
                               const std::vector<Eigen::MatrixXd>& text_states,
                               const std::vector<int>& layers, double alpha) {
  const auto speech = model::forward(tape, p, cfg, s, model::Modality::kSpeech);
  std::vector<nn::Var<double>> terms{
      model::causal_lm_loss(speech.logits, speech.spans, s.target, cfg.eos_id)};
  std::vector<double> weights{alpha};
  for (int l : layers) {
    const auto span = nn::slice_rows(speech.hidden[l], speech.spans.source.begin,
                                     speech.spans.source.size());
    terms.push_back(nn::wasserstein(span, tape.constant(text_states[l]), exact_solver()));
    weights.push_back(training::layer_weight(alpha, layers.size()));
  }
  return nn::weighted_sum<double>(terms, weights);
}

training::TrainConfig short_run(std::int64_t steps) {
  training::TrainConfig tc;
  tc.batch_size = 3;
  tc.steps = steps;
  tc.val_interval = 2;
  tc.val_samples = 4;
  tc.max_gen_len = 6;
  tc.schedule.warmup_start = 1e-3;
  tc.schedule.peak = 1e-2;
  tc.schedule.floor = 1e-3;
  tc.schedule.warmup_steps = 2;
  tc.schedule.total_steps = steps;
  return tc;
}

// ---------------------------------------------------------------------------
// Criteria

Outcome exact_solver_oracles() {
  Outcome o;
  const auto instances = ot_instances();
  const auto start = Clock::now();
  double worst_square = 0.0, worst_rect = 0.0;
  for (const auto& inst : instances) {
    const double exact = ot::solve_exact_small(inst.cost).distance;
    if (inst.square) {
      worst_square = std::max(worst_square, std::abs(exact - testing::permutation_oracle(inst.cost)));
    } else {
      worst_rect = std::max(worst_rect, std::abs(exact - testing::min_cost_flow_oracle(inst.cost)));
    }
  }
  const double elapsed = seconds_since(start);
  o.detail << "square max|diff|=" << worst_square << " rectangular max|diff|=" << worst_rect
           << " runtime=" << elapsed << "s";
  o.require(worst_square <= kOracleTol, "square instances vs permutation oracle");
  o.require(worst_rect <= kOracleTol, "rectangular instances vs min-cost-flow oracle");
  o.require(elapsed < kOracleSeconds, "runtime");
  return o;
}

Outcome sinkhorn_accuracy() {
  Outcome o;
  double worst_rel = 0.0, worst_violation = 0.0;
  for (const auto& inst : ot_instances()) {
    const double exact = ot::solve_exact_small(inst.cost).distance;
    const auto approx = ot::sinkhorn(inst.cost, 0.01 * inst.cost.mean(), 500, 1e-6);
    worst_violation = std::max(worst_violation, approx.marginal_violation);
    const double rel = exact > 0.0 ? std::abs(approx.distance - exact) / exact
                                   : std::abs(approx.distance);
    worst_rel = std::max(worst_rel, rel);
  }
  o.detail << "max relative error=" << worst_rel << " max marginal violation=" << worst_violation;
  o.require(worst_rel <= kSinkhornRelTol, "relative error");
  o.require(worst_violation <= kMarginalTol, "marginal violation");
  return o;
}

Outcome gradient_checks() {
  Outcome o;
  auto report = [&](const std::string& name, const testing::GradCheckResult& r) {
    o.detail << " " << name << "(" << r.coordinates << " coords, worst " << r.worst_rel_err
             << ")";
    o.require(r.coordinates >= kFdMinCoords, name + " coordinate count");
    o.require(r.failures == 0, name + " at " + r.worst_name);
  };

  {
    // Transport gradient with the plan from the exact solver.
    std::mt19937_64 rng(8);
    testing::GradCheckResult r;
    for (int t = 0; r.coordinates < 2 * kFdMinCoords; ++t) {
      const int n = 2 + t % 4, m = 2 + (t / 2) % 4, d = 1 + t % 3;
      Eigen::MatrixXd hs = testing::random_matrix(rng, n, d);
      const Eigen::MatrixXd ht = testing::random_matrix(rng, m, d);
      const Eigen::MatrixXd grad =
          ot::transport_gradient(hs, ht, ot::transport(hs, ht, exact_solver()).plan);
      for (Eigen::Index k = 0; k < hs.size(); ++k) {
        const double orig = hs.data()[k];
        hs.data()[k] = orig + kFdStep;
        const double up = ot::wasserstein_distance(hs, ht, exact_solver());
        hs.data()[k] = orig - kFdStep;
        const double down = ot::wasserstein_distance(hs, ht, exact_solver());
        hs.data()[k] = orig;
        const double err =
            testing::relative_error(grad.data()[k], (up - down) / (2.0 * kFdStep));
        ++r.coordinates;
        if (err > kFdRelTol) ++r.failures;
        r.worst_rel_err = std::max(r.worst_rel_err, err);
      }
    }
    report("transport", r);
  }

  const auto cfg = small_model();
  const auto corpus = small_corpus();
  const auto samples = training::with_task(corpus.train, training::Task::kTranslation, cfg);
  using LossFn =
      std::function<nn::Var<double>(nn::Tape<double>&, nn::ParameterStore<double>&)>;
  auto check = [&](nn::ParameterStore<double>& p, std::uint64_t seed, const LossFn& loss) {
    return testing::check_gradients(p, loss, seed, 3, kFdMinCoords, kFdStep, kFdRelTol);
  };

  for (auto modality : {model::Modality::kSpeech, model::Modality::kText}) {
    auto p = jittered(cfg, 5);
    const auto& s = samples[2];
    report(std::string("lm-") + model::to_string(modality),
           check(p, 6, [&](nn::Tape<double>& tape, nn::ParameterStore<double>& store) {
             const auto f = model::forward(tape, store, cfg, s, modality);
             return model::causal_lm_loss(f.logits, f.spans, s.target, cfg.eos_id);
           }));
  }

  {
    // The implementation's joint gradient must equal the detached reference,
    // and the reference must match finite differences.
    auto p = jittered(cfg, 7);
    const std::vector<int> layers = {0, 1, 2};
    const auto& s = samples[1];
    const auto text = frozen_text_states(p, cfg, s);
    p.zero_grad();
    {
      nn::Tape<double> tape;
      tape.backward(training::joint_loss(tape, p, cfg, s, layers, 0.5, exact_solver()).total);
    }
    std::vector<Eigen::MatrixXd> implementation;
    for (std::size_t i = 0; i < p.size(); ++i) implementation.push_back(p.at(i).grad);
    report("joint", check(p, 8, [&](nn::Tape<double>& tape, nn::ParameterStore<double>& store) {
             return detached_joint(tape, store, cfg, s, text, layers, 0.5);
           }));
    bool same = true;
    for (std::size_t i = 0; i < p.size(); ++i) {
      same = same && p.at(i).grad.isApprox(implementation[i], 1e-12);
    }
    o.require(same, "joint gradient equals the text-constant reference");
  }

  {
    auto p = jittered(cfg, 9);
    const std::vector<int> layers = {1};
    std::vector<std::vector<Eigen::MatrixXd>> text;
    for (int b = 0; b < 3; ++b) text.push_back(frozen_text_states(p, cfg, samples[b]));
    report("batch", check(p, 10, [&](nn::Tape<double>& tape, nn::ParameterStore<double>& store) {
             std::vector<nn::Var<double>> terms;
             for (int b = 0; b < 3; ++b) {
               terms.push_back(detached_joint(tape, store, cfg, samples[b], text[b], layers, 0.9));
             }
             const std::vector<double> w(3, 1.0 / 3.0);
             return nn::weighted_sum<double>(terms, w);
           }));
  }

  {
    auto p = jittered(cfg, 11);
    std::vector<Eigen::RowVectorXd> pooled_text;
    for (int b = 0; b < 3; ++b) {
      const auto states = frozen_text_states(p, cfg, samples[b]);
      pooled_text.push_back(states[0].colwise().mean());
    }
    Eigen::MatrixXd text(3, cfg.dim);
    for (int b = 0; b < 3; ++b) text.row(b) = pooled_text[b];
    report("contrastive",
           check(p, 12, [&](nn::Tape<double>& tape, nn::ParameterStore<double>& store) {
             std::vector<nn::Var<double>> pooled;
             for (int b = 0; b < 3; ++b) {
               const auto f =
                   model::forward(tape, store, cfg, samples[b], model::Modality::kSpeech);
               pooled.push_back(nn::mean_rows(nn::slice_rows(
                   f.hidden[0], f.spans.source.begin, f.spans.source.size())));
             }
             return training::contrastive_baseline_loss(nn::concat_rows<double>(pooled),
                                                        tape.constant(text), 10.0);
           }));
  }
  return o;
}

Outcome retrieval_oracles() {
  Outcome o;
  Eigen::MatrixXd d(3, 3);
  d << 0.5, 0.1, 0.9, 0.4, 0.2, 0.8, 0.7, 0.6, 0.3;
  const double hand = retrieval::mrr(d).mrr;
  const double identity =
      retrieval::mrr(Eigen::MatrixXd::Ones(5, 5) - Eigen::MatrixXd::Identity(5, 5)).mrr;

  const int q = 1000;
  double expected = 0.0;
  for (int k = 1; k <= q; ++k) expected += 1.0 / k;
  expected /= q;
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Eigen::MatrixXd random(q, q);
  const int trials = 20;
  double total = 0.0;
  for (int t = 0; t < trials; ++t) {
    for (Eigen::Index k = 0; k < random.size(); ++k) random.data()[k] = u(rng);
    total += retrieval::mrr(random).mrr;
  }
  const double mean = total / trials;
  o.detail << "3x3=" << hand << " identity=" << identity << " random mean=" << mean
           << " expected=" << expected;
  o.require(hand == 5.0 / 6.0, "three-by-three case");
  o.require(identity == 1.0, "identity case");
  o.require(std::abs(mean - expected) <= kMonteCarloTol, "Monte Carlo expectation");
  return o;
}

Outcome combined_objective() {
  Outcome o;
  const auto example = training::combine_losses(2.0, {{0, 4.0}, {1, 6.0}}, 0.99);
  const double w = (1.0 - 0.99) / 2.0;
  o.detail << "example total=" << example.total;
  o.require(std::abs(example.total - 2.03) <= 1e-12, "worked example");
  o.require(example.total == 0.99 * 2.0 + w * 4.0 + w * 6.0, "exact formula");
  o.require(training::combine_losses(2.0, {{0, 4.0}, {1, 6.0}}, 1.0).total == 2.0,
            "alpha one drops the alignment terms");
  o.require(training::combine_losses(2.0, {}, 0.7).total == 0.7 * 2.0,
            "empty layer set leaves only the scaled CE");

  const auto cfg = small_model();
  const auto corpus = small_corpus();
  const auto init = model::init_parameters(cfg, 11);
  auto joint = short_run(8);
  joint.alpha = 1.0;
  joint.layers = {0, 2};
  auto baseline = short_run(8);
  baseline.alpha = 1.0;
  baseline.monitor_layers = {0, 2};
  const auto a = training::joint_train_stage(init, cfg, corpus.train, corpus.valid, joint);
  const auto b = training::joint_train_stage(init, cfg, corpus.train, corpus.valid, baseline);
  bool identical = a.log.size() == b.log.size();
  for (std::size_t i = 0; identical && i < a.last.size(); ++i) {
    identical = a.last.at(i).value == b.last.at(i).value;
  }
  // Train records of the aligned run also report the zero-weight distances,
  // so compare the trajectory fields rather than whole lines.
  for (std::size_t i = 0; identical && i < a.log.size(); ++i) {
    const auto& x = a.log[i];
    const auto& y = b.log[i];
    identical = x.step == y.step && x.split == y.split && x.ce == y.ce &&
                x.total == y.total && x.lr == y.lr && x.token_acc == y.token_acc &&
                x.exact_match == y.exact_match && (x.split != "valid" || x.wass == y.wass);
  }
  o.detail << " alpha-one trajectory " << (identical ? "bitwise identical" : "differs");
  o.require(identical, "alpha one trajectory equals CE-only");
  return o;
}

struct ModelReport {
  double mean_wass = 0.0;
  double mrr0 = 0.0;
  double exact_match = 0.0;
  double token_acc = 0.0;
};

ModelReport measure(const nn::ParameterStore<float>& p, const model::ModelConfig& cfg,
                    std::span<const data::PairedSample> test, const std::vector<int>& layers,
                    const config::RunConfig& run, int threads) {
  ModelReport r;
  const auto score =
      diagnostics::alignment_score(p, cfg, cfg.translation_prompt, test, layers, run.solver);
  double sum = 0.0;
  for (const auto& [l, v] : score.per_layer_mean) sum += v;
  r.mean_wass = sum / static_cast<double>(score.per_layer_mean.size());
  const std::vector<int> zero = {0};
  r.mrr0 = retrieval::retrieval_at_layers(p, cfg, cfg.translation_prompt, test, zero,
                                          run.solver, threads)[0]
               .mrr;
  const auto ev = diagnostics::generation_eval(p, cfg, test, model::Modality::kSpeech,
                                               run.eval.max_gen_len);
  r.exact_match = ev.metrics.exact_match;
  r.token_acc = ev.metrics.token_acc;
  return r;
}

Outcome protocol_analog() {
  Outcome o;
  const auto run = config::default_config();
  const auto& cfg = run.model;
  const int threads = config::thread_count_from_env();
  const auto corpus = data::synthesize_corpus(run.data_seed, run.data);

  const auto start = Clock::now();
  const auto pre = training::pretrain_stage(model::init_parameters(cfg, run.init_seed), cfg,
                                            corpus.train, corpus.valid, run.pretrain);
  const double pretrain_secs = seconds_since(start);

  auto queries = training::with_task(corpus.valid, training::Task::kTranslation, cfg);
  queries.resize(std::min<std::size_t>(queries.size(), run.selection.queries));
  const auto reports = retrieval::layerwise_retrieval(pre.best, cfg, cfg.translation_prompt,
                                                      queries, run.solver, threads);
  const auto selection = retrieval::select_layers(reports, run.selection.threshold);
  const double select_secs = seconds_since(start) - pretrain_secs;
  if (selection.empty) {
    o.require(false, "layer selection is empty");
    return o;
  }

  auto aligned_cfg = run.joint;
  aligned_cfg.layers = selection.layers;
  const auto aligned =
      training::joint_train_stage(pre.best, cfg, corpus.train, corpus.valid, aligned_cfg);
  const double pipeline_secs = seconds_since(start);

  auto baseline_cfg = run.joint;
  baseline_cfg.alpha = 1.0;
  baseline_cfg.layers.clear();
  const auto baseline =
      training::joint_train_stage(pre.best, cfg, corpus.train, corpus.valid, baseline_cfg);

  auto test = training::with_task(corpus.test, training::Task::kTranslation, cfg);
  test.resize(std::min<std::size_t>(test.size(), run.eval.samples));
  const auto a = measure(aligned.best, cfg, test, selection.layers, run, threads);
  const auto b = measure(baseline.best, cfg, test, selection.layers, run, threads);
  const double total_secs = seconds_since(start);

  const double reduction = 1.0 - a.mean_wass / b.mean_wass;
  o.detail << "layers=[";
  for (std::size_t i = 0; i < selection.layers.size(); ++i) {
    o.detail << (i ? "," : "") << selection.layers[i];
  }
  o.detail << "] pretrain_acc=" << *pre.log.back().token_acc << " W aligned=" << a.mean_wass
           << " baseline=" << b.mean_wass << " (reduction " << reduction << ")"
           << " MRR0 aligned=" << a.mrr0 << " baseline=" << b.mrr0
           << " EM aligned=" << a.exact_match << " baseline=" << b.exact_match
           << " token_acc aligned=" << a.token_acc << " baseline=" << b.token_acc
           << " time pretrain=" << pretrain_secs << "s select=" << select_secs
           << "s pipeline=" << pipeline_secs << "s with-baseline-and-eval=" << total_secs << "s";
  o.require(reduction >= kWassReduction, "(a) Wasserstein reduction");
  o.require(a.mrr0 >= b.mrr0, "(b) layer-0 MRR not lower");
  o.require(a.exact_match >= b.exact_match - kExactMatchSlack, "(c) exact-match guard");
  o.require(pipeline_secs <= kPipelineSeconds, "pipeline time budget");
  return o;
}

Outcome selection_fixture() {
  Outcome o;
  std::vector<retrieval::RetrievalReport> reports;
  int layer = 0;
  for (double v : {0.9, 0.6, 0.04, 0.01}) {
    retrieval::RetrievalReport r;
    r.layer = layer++;
    r.mrr = v;
    reports.push_back(r);
  }
  const auto sel = retrieval::select_layers(reports, 0.05);
  o.detail << "selected " << sel.layers.size() << " layers";
  o.require(sel.layers == std::vector<int>{0, 1}, "selection is {0,1}");
  return o;
}

Outcome early_stopping() {
  Outcome o;
  nn::EarlyStopping stop(4);
  const std::vector<double> acc = {0.1, 0.2, 0.5, 0.4, 0.5, 0.3, 0.45, 0.9};
  int stopped_at = -1;
  for (std::size_t i = 0; i < acc.size(); ++i) {
    if (stop.update(acc[i])) {
      stopped_at = static_cast<int>(i) + 1;
      break;
    }
  }
  o.detail << "stopped after validation " << stopped_at << ", best " << stop.best();
  o.require(stopped_at == 7, "stop after four non-improving validations");
  o.require(stop.best_index() == 2, "best is the third validation");
  return o;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool run_pipeline(const fs::path& dir, const fs::path& config_file, std::string& failure) {
  const std::string cli = std::string("\"") + MODALIGN_CLI_PATH + "\"";
  const std::string cfg = " --config \"" + config_file.string() + "\"";
  const std::string corpus = " --corpus \"" + (dir / "corpus").string() + "\"";
  const std::vector<std::pair<std::string, std::string>> steps = {
      {"synth", "synth" + cfg + " --out \"" + (dir / "corpus").string() + "\""},
      {"pretrain", "pretrain" + cfg + corpus + " --out \"" + (dir / "pretrain").string() + "\""},
      {"select-layers", "select-layers" + cfg + corpus + " --checkpoint \"" +
                            (dir / "pretrain" / "best.ckpt").string() + "\" --out \"" +
                            (dir / "select").string() + "\""},
      {"train-joint", "train-joint" + cfg + corpus + " --checkpoint \"" +
                          (dir / "pretrain" / "best.ckpt").string() + "\" --selection \"" +
                          (dir / "select" / "selection.jsonl").string() +
                          "\" --layers auto --out \"" + (dir / "joint").string() + "\""},
      {"eval", "eval" + cfg + corpus + " --checkpoint \"" +
                   (dir / "joint" / "best.ckpt").string() + "\""},
  };
  for (const auto& [name, args] : steps) {
    const std::string cmd = cli + " " + args + " >>\"" + (dir / "stdout.txt").string() +
                            "\" 2>>\"" + (dir / "stderr.txt").string() + "\"";
    const int status = std::system(cmd.c_str());
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
      failure = name + " exited abnormally";
      return false;
    }
  }
  return true;
}

Outcome pipeline_reproducibility() {
  Outcome o;
  const fs::path root = fs::temp_directory_path() / "modalign_acceptance_repro";
  fs::remove_all(root);
  fs::create_directories(root);
  const fs::path config_file = root / "config.json";
  {
    std::ofstream out(config_file);
    out << R"({
  "data": {"size": 120},
  "pretrain": {"steps": 30, "batch_size": 4, "val_interval": 10, "val_samples": 8},
  "joint": {"steps": 30, "batch_size": 4, "val_interval": 10, "val_samples": 8},
  "selection": {"queries": 12},
  "eval": {"samples": 12}
})";
  }
  for (const char* name : {"first", "second"}) {
    fs::create_directories(root / name);
    std::string failure;
    if (!run_pipeline(root / name, config_file, failure)) {
      o.require(false, std::string(name) + " run: " + failure);
      return o;
    }
  }
  int compared = 0;
  for (const fs::path& rel : {fs::path("pretrain/metrics.jsonl"), fs::path("joint/metrics.jsonl"),
                             fs::path("select/selection.jsonl"), fs::path("stdout.txt"),
                             fs::path("joint/best.ckpt")}) {
    const auto a = slurp(root / "first" / rel);
    const auto b = slurp(root / "second" / rel);
    o.require(!a.empty() && a == b, rel.string() + " identical");
    ++compared;
  }
  o.detail << compared << " artifacts compared byte for byte";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const std::map<int, std::function<Outcome()>> criteria = {
      {1, exact_solver_oracles},    {2, sinkhorn_accuracy}, {3, gradient_checks},
      {4, retrieval_oracles},       {5, combined_objective}, {6, protocol_analog},
      {7, selection_fixture},       {8, early_stopping},     {9, pipeline_reproducibility},
  };
  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) {
    const int n = std::atoi(argv[i]);
    if (!criteria.count(n)) {
      std::cerr << "unknown criterion '" << argv[i] << "' (expected 1..9)\n";
      return 2;
    }
    selected.push_back(n);
  }
  if (selected.empty()) {
    for (const auto& [n, fn] : criteria) selected.push_back(n);
  }

  bool all = true;
  for (int n : selected) {
    Outcome o;
    try {
      o = criteria.at(n)();
    } catch (const std::exception& e) {
      o.require(false, std::string("exception: ") + e.what());
    }
    all = all && o.pass;
    std::cout << "criterion " << n << ": " << (o.pass ? "PASS" : "FAIL") << " "
              << o.detail.str() << std::endl;
  }
  return all ? 0 : 1;
}
