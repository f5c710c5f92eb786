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

// Command-line driver for the staged pipeline:
//   synth -> pretrain -> select-layers -> train-joint -> eval / align-score / project
//
// Every failure prints one JSON line {"error": <kind>, "message": <text>} to
// stderr and exits nonzero. Successful subcommands print one JSON summary
// line to stdout.

#include "modalign/config.hpp"
#include "modalign/diagnostics.hpp"
#include "modalign/retrieval.hpp"
#include "modalign/training.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace modalign;
using nlohmann::ordered_json;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string one_line(std::string s) {
  for (char& c : s) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  return s;
}

void emit_error(const std::string& kind, const std::string& message) {
  ordered_json j;
  j["error"] = kind;
  j["message"] = one_line(message);
  std::cerr << j.dump() << std::endl;
}

void emit_warning(const std::string& message) {
  ordered_json j;
  j["warning"] = one_line(message);
  std::cerr << j.dump() << std::endl;
}

config::RunConfig resolve_config(const std::string& path) {
  return path.empty() ? config::default_config() : config::load_config(path);
}

std::vector<data::PairedSample> load_split(const fs::path& corpus, const std::string& split,
                                           int limit) {
  auto samples = data::load_split(corpus, split);
  if (limit > 0 && static_cast<std::size_t>(limit) < samples.size()) {
    samples.resize(static_cast<std::size_t>(limit));
  }
  if (samples.empty()) throw data::DataError("split '" + split + "' is empty");
  return samples;
}

// Appends metrics records and writes a checkpoint at every validation.
struct StageWriter {
  fs::path out;
  std::string stage;
  model::ModelConfig model;
  std::ofstream metrics;

  StageWriter(fs::path dir, std::string name, const model::ModelConfig& cfg)
      : out(std::move(dir)), stage(std::move(name)), model(cfg) {
    fs::create_directories(out / "checkpoints");
    metrics.open(out / "metrics.jsonl", std::ios::trunc);
    if (!metrics) throw std::runtime_error("cannot write " + (out / "metrics.jsonl").string());
  }

  training::TrainHooks hooks() {
    training::TrainHooks h;
    h.on_record = [this](const training::MetricRecord& r) {
      metrics << training::to_json_line(r) << '\n';
      metrics.flush();
    };
    h.on_validation = [this](const training::MetricRecord& r,
                             const nn::ParameterStore<float>& params) {
      char name[32];
      std::snprintf(name, sizeof name, "step_%06lld.ckpt", static_cast<long long>(r.step));
      config::save_model_checkpoint(out / "checkpoints" / name, model, params, stage, r.step);
    };
    h.on_abort = [this](const nn::ParameterStore<float>& params) {
      config::save_model_checkpoint(out / "abort.ckpt", model, params, stage, -1);
    };
    return h;
  }

  void finish(const training::TrainResult& result) {
    config::save_model_checkpoint(out / "best.ckpt", model, result.best, stage,
                                  result.steps_run);
    config::save_model_checkpoint(out / "last.ckpt", model, result.last, stage,
                                  result.steps_run);
  }
};

ordered_json last_valid(const training::TrainResult& r) {
  for (auto it = r.log.rbegin(); it != r.log.rend(); ++it) {
    if (it->split == "valid") return ordered_json::parse(training::to_json_line(*it));
  }
  return nullptr;
}

ordered_json layers_json(const std::vector<int>& layers) {
  ordered_json j = ordered_json::array();
  for (int l : layers) j.push_back(l);
  return j;
}

void write_json(const fs::path& path, const ordered_json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

model::Modality parse_modality(const std::string& s) {
  if (s == "speech") return model::Modality::kSpeech;
  if (s == "text") return model::Modality::kText;
  throw UsageError("modality must be speech or text, got '" + s + "'");
}

training::Task parse_task(const std::string& s) {
  if (s == "translation") return training::Task::kTranslation;
  if (s == "recognition") return training::Task::kRecognition;
  throw UsageError("task must be translation or recognition, got '" + s + "'");
}

// ---- subcommands ----------------------------------------------------------

struct Args {
  std::string config;
  std::string out;
  std::string corpus;
  std::string checkpoint;
  std::string selection;
  std::string layers = "auto";
  std::string modality = "speech";
  std::string task = "translation";
  std::string split;
  std::string init;
  int samples = 0;
  int layer = 0;
  bool ce_only = false;
};

int run_synth(const Args& a) {
  const auto cfg = resolve_config(a.config);
  config::RunLock lock(a.out);
  const auto corpus = data::synthesize_corpus(cfg.data_seed, cfg.data);
  data::write_corpus(a.out, corpus);
  config::write_config(fs::path(a.out) / "config.json", cfg);
  ordered_json j;
  j["command"] = "synth";
  j["train"] = corpus.train.size();
  j["valid"] = corpus.valid.size();
  j["test"] = corpus.test.size();
  std::cout << j.dump() << std::endl;
  return 0;
}

int run_pretrain(const Args& a) {
  const auto cfg = resolve_config(a.config);
  config::RunLock lock(a.out);
  config::write_config(fs::path(a.out) / "config.json", cfg);
  const auto train = load_split(a.corpus, "train", 0);
  const auto valid = load_split(a.corpus, "valid", 0);
  nn::ParameterStore<float> init;
  if (a.init.empty()) {
    init = model::init_parameters(cfg.model, cfg.init_seed);
  } else {
    auto ck = config::load_model_checkpoint(a.init);
    if (config::model_to_json(ck.config) != config::model_to_json(cfg.model)) {
      throw config::ConfigError("--init checkpoint architecture differs from config");
    }
    init = std::move(ck.params);
  }
  StageWriter writer(a.out, "pretrain", cfg.model);
  const auto result = training::pretrain_stage(init, cfg.model, train, valid, cfg.pretrain,
                                               writer.hooks());
  writer.finish(result);
  ordered_json j;
  j["command"] = "pretrain";
  j["steps"] = result.steps_run;
  j["early_stopped"] = result.early_stopped;
  j["valid"] = last_valid(result);
  std::cout << j.dump() << std::endl;
  return 0;
}

int run_select_layers(const Args& a) {
  const auto cfg = resolve_config(a.config);
  const int threads = config::thread_count_from_env();
  config::RunLock lock(a.out);
  config::write_config(fs::path(a.out) / "config.json", cfg);
  const auto ck = config::load_model_checkpoint(a.checkpoint);
  const auto split = a.split.empty() ? cfg.selection.split : a.split;
  const auto samples = training::with_task(
      load_split(a.corpus, split, cfg.selection.queries), training::Task::kTranslation,
      ck.config);
  const auto reports = retrieval::layerwise_retrieval(
      ck.params, ck.config, ck.config.translation_prompt, samples, cfg.solver, threads);
  const auto selection = retrieval::select_layers(reports, cfg.selection.threshold);
  retrieval::write_report(fs::path(a.out) / "selection.jsonl", reports, selection);
  if (selection.empty) {
    emit_warning("no layer exceeds MRR threshold " + std::to_string(selection.threshold) +
                 "; joint training with this selection is CE-only");
  }
  ordered_json j;
  j["command"] = "select-layers";
  ordered_json mrr = ordered_json::array();
  for (const auto& r : reports) mrr.push_back(r.mrr);
  j["mrr"] = std::move(mrr);
  j["selection"] = layers_json(selection.layers);
  j["queries"] = samples.size();
  std::cout << j.dump() << std::endl;
  return 0;
}

int run_train_joint(const Args& a) {
  const auto cfg = resolve_config(a.config);
  const auto spec = config::parse_layer_spec(a.layers);
  config::RunLock lock(a.out);
  config::write_config(fs::path(a.out) / "config.json", cfg);
  auto ck = config::load_model_checkpoint(a.checkpoint);
  if (config::model_to_json(ck.config) != config::model_to_json(cfg.model)) {
    throw config::ConfigError("checkpoint architecture differs from config");
  }

  std::vector<int> layers = spec.layers;
  if (spec.automatic) {
    if (a.selection.empty()) {
      throw UsageError("--layers auto needs --selection (a select-layers report)");
    }
    const auto sel = retrieval::read_selection(a.selection);
    if (sel.num_layer != cfg.model.layers) {
      throw config::ConfigError("selection report covers " + std::to_string(sel.num_layer) +
                                " layers, model has " + std::to_string(cfg.model.layers));
    }
    layers = sel.layers;
  }
  config::check_layer_range(layers, cfg.model.layers);
  if (layers.empty()) emit_warning("empty alignment layer set; training is CE-only");

  training::TrainConfig tc = cfg.joint;
  if (a.ce_only) {
    // Baseline: CE only, with the alignment layers still measured.
    tc.alpha = 1.0;
    tc.monitor_layers = layers;
    tc.layers.clear();
  } else {
    tc.layers = layers;
  }

  ordered_json run;
  run["command"] = "train-joint";
  run["checkpoint"] = a.checkpoint;
  run["selection"] = a.selection;
  run["layers"] = layers_json(layers);
  run["ce_only"] = a.ce_only;
  run["alpha"] = tc.alpha;
  write_json(fs::path(a.out) / "run.json", run);

  const auto train = load_split(a.corpus, "train", 0);
  const auto valid = load_split(a.corpus, "valid", 0);
  StageWriter writer(a.out, "joint", cfg.model);
  const auto result =
      training::joint_train_stage(ck.params, cfg.model, train, valid, tc, writer.hooks());
  writer.finish(result);

  ordered_json j;
  j["command"] = "train-joint";
  j["layers"] = layers_json(layers);
  j["ce_only"] = a.ce_only;
  j["steps"] = result.steps_run;
  j["early_stopped"] = result.early_stopped;
  j["valid"] = last_valid(result);
  std::cout << j.dump() << std::endl;
  return 0;
}

int run_eval(const Args& a) {
  const auto cfg = resolve_config(a.config);
  const auto ck = config::load_model_checkpoint(a.checkpoint);
  const auto modality = parse_modality(a.modality);
  const auto task = parse_task(a.task);
  const auto split = a.split.empty() ? cfg.eval.split : a.split;
  const int limit = a.samples > 0 ? a.samples : cfg.eval.samples;
  const auto samples = training::with_task(load_split(a.corpus, split, limit), task, ck.config);
  const auto ev = diagnostics::generation_eval(ck.params, ck.config, samples, modality,
                                               cfg.eval.max_gen_len);
  if (!a.out.empty()) {
    const fs::path dump(a.out);
    if (dump.has_parent_path()) fs::create_directories(dump.parent_path());
    diagnostics::write_generations(dump, ev);
  }
  ordered_json j;
  j["command"] = "eval";
  j["modality"] = model::to_string(modality);
  j["task"] = a.task;
  j["split"] = split;
  j["samples"] = ev.metrics.samples;
  j["token_acc"] = ev.metrics.token_acc;
  j["exact_match"] = ev.metrics.exact_match;
  std::cout << j.dump() << std::endl;
  return 0;
}

int run_align_score(const Args& a) {
  const auto cfg = resolve_config(a.config);
  const auto ck = config::load_model_checkpoint(a.checkpoint);
  const auto spec = config::parse_layer_spec(a.layers);
  std::vector<int> layers = spec.layers;
  if (spec.automatic) {
    if (a.selection.empty()) throw UsageError("--layers auto needs --selection");
    layers = retrieval::read_selection(a.selection).layers;
  }
  if (layers.empty()) throw UsageError("alignment score needs at least one layer");
  config::check_layer_range(layers, ck.config.layers);
  const auto split = a.split.empty() ? cfg.eval.split : a.split;
  const int limit = a.samples > 0 ? a.samples : cfg.eval.samples;
  const auto samples = training::with_task(load_split(a.corpus, split, limit),
                                           training::Task::kTranslation, ck.config);
  const auto score = diagnostics::alignment_score(
      ck.params, ck.config, ck.config.translation_prompt, samples, layers, cfg.solver);
  ordered_json j;
  j["command"] = "align-score";
  ordered_json means = ordered_json::object();
  for (const auto& [l, v] : score.per_layer_mean) means[std::to_string(l)] = v;
  j["mean_wass"] = std::move(means);
  j["log_score"] = std::isfinite(score.log_score) ? ordered_json(score.log_score) : nullptr;
  j["zero_distance"] = score.zero_distance;
  j["samples"] = score.samples;
  std::cout << j.dump() << std::endl;
  return 0;
}

int run_project(const Args& a) {
  const auto cfg = resolve_config(a.config);
  const auto ck = config::load_model_checkpoint(a.checkpoint);
  config::check_layer_range({a.layer}, ck.config.layers);
  const auto split = a.split.empty() ? cfg.eval.split : a.split;
  const int limit = a.samples > 0 ? a.samples : cfg.eval.samples;
  const auto samples = training::with_task(load_split(a.corpus, split, limit),
                                           training::Task::kTranslation, ck.config);
  const fs::path prefix(a.out);
  if (prefix.has_parent_path()) fs::create_directories(prefix.parent_path());
  const auto pooled = diagnostics::pooled_representations(
      ck.params, ck.config, ck.config.translation_prompt, samples, a.layer);
  const auto files = diagnostics::projection_export(pooled, prefix);
  if (files.projection.degenerate) emit_warning(files.projection.warning);
  ordered_json j;
  j["command"] = "project";
  j["layer"] = a.layer;
  j["samples"] = samples.size();
  j["coordinates"] = files.coordinates.empty() ? ordered_json(nullptr)
                                               : ordered_json(files.coordinates.string());
  j["vectors"] = files.vectors.string();
  j["degenerate"] = files.projection.degenerate;
  std::cout << j.dump() << std::endl;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "modalign: speech/text representation alignment on a toy decoder.\n"
      "Environment: MODALIGN_THREADS sets worker threads for retrieval (default 1)."};
  app.require_subcommand(1);
  Args a;

  auto* synth = app.add_subcommand("synth", "Synthesize the paired corpus");
  synth->add_option("--config", a.config, "JSON run config (defaults if omitted)");
  synth->add_option("--out", a.out, "Corpus directory")->required();

  auto* pre = app.add_subcommand("pretrain", "Stage 1: speech recognition pretraining");
  pre->add_option("--config", a.config, "JSON run config");
  pre->add_option("--corpus", a.corpus, "Corpus directory")->required();
  pre->add_option("--out", a.out, "Run directory")->required();
  pre->add_option("--init", a.init, "Start from this checkpoint instead of a fresh init");

  auto* sel = app.add_subcommand("select-layers", "Stage 2: per-layer retrieval MRR");
  sel->add_option("--config", a.config, "JSON run config");
  sel->add_option("--checkpoint", a.checkpoint, "Pretrained checkpoint")->required();
  sel->add_option("--corpus", a.corpus, "Corpus directory")->required();
  sel->add_option("--out", a.out, "Output directory (selection.jsonl)")->required();
  sel->add_option("--split", a.split, "Split to query (default: selection.split)");

  auto* joint = app.add_subcommand("train-joint", "Stage 3: joint CE + alignment training");
  joint->add_option("--config", a.config, "JSON run config");
  joint->add_option("--checkpoint", a.checkpoint, "Pretrained checkpoint")->required();
  joint->add_option("--corpus", a.corpus, "Corpus directory")->required();
  joint->add_option("--out", a.out, "Run directory")->required();
  joint->add_option("--selection", a.selection, "selection.jsonl from select-layers");
  joint->add_option("--layers", a.layers,
                    "auto | N | A..B | comma list (default auto: use --selection)");
  joint->add_flag("--ce-only", a.ce_only,
                  "Baseline: cross-entropy only; alignment layers are still logged");

  auto* ev = app.add_subcommand("eval", "Greedy-decoding task metrics");
  ev->add_option("--config", a.config, "JSON run config (eval section)");
  ev->add_option("--checkpoint", a.checkpoint, "Checkpoint")->required();
  ev->add_option("--corpus", a.corpus, "Corpus directory")->required();
  ev->add_option("--modality", a.modality, "speech | text (default speech)");
  ev->add_option("--task", a.task, "translation | recognition (default translation)");
  ev->add_option("--split", a.split, "Split (default: eval.split)");
  ev->add_option("--samples", a.samples, "Number of samples (default: eval.samples)");
  ev->add_option("--out", a.out, "Write generations here (id, generated, target)");

  auto* score = app.add_subcommand("align-score", "Mean Wasserstein and its log per layer");
  score->add_option("--config", a.config, "JSON run config (solver, eval sections)");
  score->add_option("--checkpoint", a.checkpoint, "Checkpoint")->required();
  score->add_option("--corpus", a.corpus, "Corpus directory")->required();
  score->add_option("--layers", a.layers, "N | A..B | comma list | auto")->required();
  score->add_option("--selection", a.selection, "selection.jsonl for --layers auto");
  score->add_option("--split", a.split, "Split (default: eval.split)");
  score->add_option("--samples", a.samples, "Number of samples (default: eval.samples)");

  auto* proj = app.add_subcommand("project", "PCA projection of pooled representations");
  proj->add_option("--config", a.config, "JSON run config (eval section)");
  proj->add_option("--checkpoint", a.checkpoint, "Checkpoint")->required();
  proj->add_option("--corpus", a.corpus, "Corpus directory")->required();
  proj->add_option("--layer", a.layer, "Layer index")->required();
  proj->add_option("--out", a.out, "Output prefix (.tsv and .mbft)")->required();
  proj->add_option("--split", a.split, "Split (default: eval.split)");
  proj->add_option("--samples", a.samples, "Number of samples (default: eval.samples)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    emit_error("usage", e.what());
    return 2;
  }

  try {
    if (*synth) return run_synth(a);
    if (*pre) return run_pretrain(a);
    if (*sel) return run_select_layers(a);
    if (*joint) return run_train_joint(a);
    if (*ev) return run_eval(a);
    if (*score) return run_align_score(a);
    if (*proj) return run_project(a);
  } catch (const UsageError& e) {
    emit_error("usage", e.what());
    return 2;
  } catch (const config::ConfigError& e) {
    emit_error("config", e.what());
    return 1;
  } catch (const data::DataError& e) {
    emit_error("data", e.what());
    return 1;
  } catch (const training::TrainingError& e) {
    emit_error("training", e.what());
    return 1;
  } catch (const std::exception& e) {
    emit_error("runtime", e.what());
    return 1;
  }
  return 0;
}
