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

#include "modalign/config.hpp"

#include "modalign/checkpoint.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

namespace modalign::config {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// Reads keys from one JSON object and remembers which ones were consumed so
// leftovers can be reported as unknown.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + " must be a JSON object");
  }

  void get(const char* key, int& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer()) fail(key, "expected an integer");
      out = v->get<int>();
    }
  }
  void get(const char* key, std::int64_t& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer()) fail(key, "expected an integer");
      out = v->get<std::int64_t>();
    }
  }
  void get(const char* key, std::uint64_t& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_unsigned()) fail(key, "expected a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void get(const char* key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) fail(key, "expected a number");
      out = v->get<double>();
    }
  }
  void get(const char* key, float& out) {
    double d = out;
    get(key, d);
    out = static_cast<float>(d);
  }
  void get(const char* key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) fail(key, "expected true or false");
      out = v->get<bool>();
    }
  }
  void get(const char* key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) fail(key, "expected a string");
      out = v->get<std::string>();
    }
  }
  void get(const char* key, std::optional<double>& out) {
    if (const json* v = find(key)) {
      if (v->is_null()) {
        out.reset();
      } else {
        if (!v->is_number()) fail(key, "expected a number or null");
        out = v->get<double>();
      }
    }
  }

  // Nested object, or nullptr when absent.
  const json* child(const char* key) { return find(key); }
  std::string path(const char* key) const { return path_ + "." + key; }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) {
        throw ConfigError("unknown config key '" + path_ + "." + item.key() + "'");
      }
    }
  }

 private:
  const json* find(const char* key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  [[noreturn]] void fail(const char* key, const std::string& what) const {
    throw ConfigError("config key '" + path_ + "." + key + "': " + what);
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_stage(const json& j, const std::string& path, training::TrainConfig& t,
                bool joint) {
  Section s(j, path);
  s.get("steps", t.steps);
  s.get("batch_size", t.batch_size);
  s.get("val_interval", t.val_interval);
  s.get("val_samples", t.val_samples);
  s.get("patience", t.patience);
  s.get("early_stop", t.early_stop);
  s.get("seed", t.seed);
  s.get("max_gen_len", t.max_gen_len);
  if (const json* sched = s.child("schedule")) {
    Section c(*sched, s.path("schedule"));
    c.get("warmup_start", t.schedule.warmup_start);
    c.get("peak", t.schedule.peak);
    c.get("floor", t.schedule.floor);
    c.get("warmup_steps", t.schedule.warmup_steps);
    c.get("total_steps", t.schedule.total_steps);
    c.finish();
  }
  if (const json* adam = s.child("adam")) {
    Section c(*adam, s.path("adam"));
    c.get("beta1", t.adam.beta1);
    c.get("beta2", t.adam.beta2);
    c.get("eps", t.adam.eps);
    c.get("weight_decay", t.adam.weight_decay);
    c.get("grad_clip", t.adam.grad_clip);
    c.finish();
  }
  if (joint) {
    s.get("alpha", t.alpha);
    std::string method = t.method == training::AlignMethod::kWasserstein
                             ? "wasserstein"
                             : "contrastive";
    s.get("method", method);
    if (method == "wasserstein") {
      t.method = training::AlignMethod::kWasserstein;
    } else if (method == "contrastive") {
      t.method = training::AlignMethod::kContrastive;
    } else {
      throw ConfigError("config key '" + path +
                        ".method': expected \"wasserstein\" or \"contrastive\"");
    }
    s.get("contrastive_scale", t.contrastive_scale);
  }
  s.finish();
}

ordered_json stage_to_json(const training::TrainConfig& t, bool joint) {
  ordered_json j;
  j["steps"] = t.steps;
  j["batch_size"] = t.batch_size;
  j["val_interval"] = t.val_interval;
  j["val_samples"] = t.val_samples;
  j["patience"] = t.patience;
  j["early_stop"] = t.early_stop;
  j["seed"] = t.seed;
  j["max_gen_len"] = t.max_gen_len;
  j["schedule"] = {{"warmup_start", t.schedule.warmup_start},
                   {"peak", t.schedule.peak},
                   {"floor", t.schedule.floor},
                   {"warmup_steps", t.schedule.warmup_steps},
                   {"total_steps", t.schedule.total_steps}};
  j["adam"] = {{"beta1", t.adam.beta1},
               {"beta2", t.adam.beta2},
               {"eps", t.adam.eps},
               {"weight_decay", t.adam.weight_decay},
               {"grad_clip", t.adam.grad_clip}};
  if (joint) {
    j["alpha"] = t.alpha;
    j["method"] =
        t.method == training::AlignMethod::kWasserstein ? "wasserstein" : "contrastive";
    j["contrastive_scale"] = t.contrastive_scale;
  }
  return j;
}

void check_split(const std::string& split, const std::string& key) {
  if (split != "train" && split != "valid" && split != "test") {
    throw ConfigError("config key '" + key + "': expected train, valid or test");
  }
}

// Vocabulary-dependent fields follow the data vocabulary.
void derive_model(RunConfig& cfg) {
  const int v = cfg.data.vocab_size;
  if (v < 6) throw ConfigError("data.vocab_size must be >= 6 to hold the task prompts");
  cfg.model.vocab_size = v + 3;
  cfg.model.pad_id = v;
  cfg.model.bos_id = v + 1;
  cfg.model.eos_id = v + 2;
  cfg.model.recognition_prompt = {cfg.model.bos_id, 0, 1, 2};
  cfg.model.translation_prompt = {cfg.model.bos_id, 3, 4, 5};
  cfg.model.adapter.feature_dim = cfg.data.feature_dim;
}

}  // namespace

training::TrainConfig default_stage() {
  training::TrainConfig t;
  t.steps = 2000;
  t.batch_size = 16;
  t.val_interval = 200;
  t.val_samples = 100;
  t.patience = 4;
  t.schedule.warmup_start = 2e-5;
  t.schedule.peak = 2e-3;
  t.schedule.floor = 2e-4;
  t.schedule.warmup_steps = 200;
  t.schedule.total_steps = 2000;
  return t;
}

RunConfig default_config() {
  RunConfig cfg;
  cfg.pretrain = default_stage();
  cfg.pretrain.alpha = 1.0;
  cfg.joint = default_stage();
  cfg.joint.alpha = 0.99;
  derive_model(cfg);
  return cfg;
}

ot::Method parse_method(const std::string& name) {
  if (name == "sinkhorn") return ot::Method::kSinkhorn;
  if (name == "exact") return ot::Method::kExact;
  if (name == "auto") return ot::Method::kAuto;
  throw ConfigError("unknown solver method '" + name + "'");
}

std::string method_name(ot::Method m) {
  switch (m) {
    case ot::Method::kSinkhorn: return "sinkhorn";
    case ot::Method::kExact: return "exact";
    case ot::Method::kAuto: return "auto";
  }
  return "sinkhorn";
}

RunConfig from_json(const json& j) {
  RunConfig cfg = default_config();
  Section root(j, "config");
  root.get("data_seed", cfg.data_seed);
  root.get("init_seed", cfg.init_seed);

  if (const json* d = root.child("data")) {
    Section s(*d, "data");
    s.get("vocab_size", cfg.data.vocab_size);
    s.get("min_tokens", cfg.data.min_tokens);
    s.get("max_tokens", cfg.data.max_tokens);
    s.get("min_frames_per_token", cfg.data.min_frames_per_token);
    s.get("max_frames_per_token", cfg.data.max_frames_per_token);
    s.get("feature_dim", cfg.data.feature_dim);
    s.get("noise", cfg.data.noise);
    s.get("size", cfg.data.size);
    s.get("valid_fraction", cfg.data.valid_fraction);
    s.get("test_fraction", cfg.data.test_fraction);
    s.finish();
  }
  if (const json* m = root.child("model")) {
    Section s(*m, "model");
    s.get("dim", cfg.model.dim);
    s.get("layers", cfg.model.layers);
    s.get("heads", cfg.model.heads);
    s.get("ffn_dim", cfg.model.ffn_dim);
    s.get("max_positions", cfg.model.max_positions);
    s.get("embed_init_std", cfg.model.embed_init_std);
    s.get("residual_init_scale", cfg.model.residual_init_scale);
    s.finish();
  }
  if (const json* a = root.child("adapter")) {
    Section s(*a, "adapter");
    s.get("window", cfg.model.adapter.window);
    s.get("queries", cfg.model.adapter.queries);
    s.get("heads", cfg.model.adapter.heads);
    s.finish();
  }
  if (const json* o = root.child("solver")) {
    Section s(*o, "solver");
    std::string method = method_name(cfg.solver.method);
    s.get("method", method);
    cfg.solver.method = parse_method(method);
    s.get("epsilon_scale", cfg.solver.epsilon_scale);
    s.get("epsilon", cfg.solver.epsilon);
    s.get("max_iters", cfg.solver.max_iters);
    s.get("tol", cfg.solver.tol);
    s.finish();
  }
  if (const json* p = root.child("pretrain")) read_stage(*p, "pretrain", cfg.pretrain, false);
  if (const json* p = root.child("joint")) read_stage(*p, "joint", cfg.joint, true);
  if (const json* sel = root.child("selection")) {
    Section s(*sel, "selection");
    s.get("threshold", cfg.selection.threshold);
    s.get("queries", cfg.selection.queries);
    s.get("split", cfg.selection.split);
    s.finish();
  }
  if (const json* ev = root.child("eval")) {
    Section s(*ev, "eval");
    s.get("samples", cfg.eval.samples);
    s.get("split", cfg.eval.split);
    s.get("max_gen_len", cfg.eval.max_gen_len);
    s.finish();
  }
  root.finish();

  derive_model(cfg);
  cfg.pretrain.solver = cfg.solver;
  cfg.joint.solver = cfg.solver;
  try {
    data::validate(cfg.data);
    model::validate(cfg.model);
    training::validate(cfg.pretrain, cfg.model);
    training::validate(cfg.joint, cfg.model);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
  if (!(cfg.solver.max_iters >= 1) || !(cfg.solver.tol > 0.0) ||
      !(cfg.solver.epsilon_scale > 0.0) ||
      (cfg.solver.epsilon && !(*cfg.solver.epsilon > 0.0))) {
    throw ConfigError("invalid config: solver parameters must be positive");
  }
  if (cfg.selection.queries < 1) throw ConfigError("selection.queries must be >= 1");
  if (cfg.eval.samples < 1) throw ConfigError("eval.samples must be >= 1");
  if (cfg.eval.max_gen_len < 1) throw ConfigError("eval.max_gen_len must be >= 1");
  check_split(cfg.selection.split, "selection.split");
  check_split(cfg.eval.split, "eval.split");
  return cfg;
}

ordered_json to_json(const RunConfig& cfg) {
  ordered_json j;
  j["data_seed"] = cfg.data_seed;
  j["init_seed"] = cfg.init_seed;
  const auto& d = cfg.data;
  j["data"] = {{"vocab_size", d.vocab_size},
               {"min_tokens", d.min_tokens},
               {"max_tokens", d.max_tokens},
               {"min_frames_per_token", d.min_frames_per_token},
               {"max_frames_per_token", d.max_frames_per_token},
               {"feature_dim", d.feature_dim},
               {"noise", d.noise},
               {"size", d.size},
               {"valid_fraction", d.valid_fraction},
               {"test_fraction", d.test_fraction}};
  const auto& m = cfg.model;
  j["model"] = {{"dim", m.dim},
                {"layers", m.layers},
                {"heads", m.heads},
                {"ffn_dim", m.ffn_dim},
                {"max_positions", m.max_positions},
                {"embed_init_std", m.embed_init_std},
                {"residual_init_scale", m.residual_init_scale}};
  j["adapter"] = {{"window", m.adapter.window},
                  {"queries", m.adapter.queries},
                  {"heads", m.adapter.heads}};
  ordered_json solver;
  solver["method"] = method_name(cfg.solver.method);
  solver["epsilon_scale"] = cfg.solver.epsilon_scale;
  solver["epsilon"] = cfg.solver.epsilon ? ordered_json(*cfg.solver.epsilon) : nullptr;
  solver["max_iters"] = cfg.solver.max_iters;
  solver["tol"] = cfg.solver.tol;
  j["solver"] = std::move(solver);
  j["pretrain"] = stage_to_json(cfg.pretrain, false);
  j["joint"] = stage_to_json(cfg.joint, true);
  j["selection"] = {{"threshold", cfg.selection.threshold},
                    {"queries", cfg.selection.queries},
                    {"split", cfg.selection.split}};
  j["eval"] = {{"samples", cfg.eval.samples},
               {"split", cfg.eval.split},
               {"max_gen_len", cfg.eval.max_gen_len}};
  return j;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("malformed config " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

void write_config(const std::filesystem::path& path, const RunConfig& cfg) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot open " + path.string() + " for writing");
  out << to_json(cfg).dump(2) << '\n';
}

ordered_json model_to_json(const model::ModelConfig& m) {
  ordered_json j;
  j["vocab_size"] = m.vocab_size;
  j["pad_id"] = m.pad_id;
  j["bos_id"] = m.bos_id;
  j["eos_id"] = m.eos_id;
  j["dim"] = m.dim;
  j["layers"] = m.layers;
  j["heads"] = m.heads;
  j["ffn_dim"] = m.ffn_dim;
  j["max_positions"] = m.max_positions;
  j["embed_init_std"] = m.embed_init_std;
  j["residual_init_scale"] = m.residual_init_scale;
  j["adapter"] = {{"window", m.adapter.window},
                  {"queries", m.adapter.queries},
                  {"feature_dim", m.adapter.feature_dim},
                  {"heads", m.adapter.heads}};
  j["recognition_prompt"] = m.recognition_prompt;
  j["translation_prompt"] = m.translation_prompt;
  return j;
}

model::ModelConfig model_from_json(const json& j) {
  model::ModelConfig m;
  Section s(j, "model");
  s.get("vocab_size", m.vocab_size);
  s.get("pad_id", m.pad_id);
  s.get("bos_id", m.bos_id);
  s.get("eos_id", m.eos_id);
  s.get("dim", m.dim);
  s.get("layers", m.layers);
  s.get("heads", m.heads);
  s.get("ffn_dim", m.ffn_dim);
  s.get("max_positions", m.max_positions);
  s.get("embed_init_std", m.embed_init_std);
  s.get("residual_init_scale", m.residual_init_scale);
  if (const json* a = s.child("adapter")) {
    Section c(*a, "model.adapter");
    c.get("window", m.adapter.window);
    c.get("queries", m.adapter.queries);
    c.get("feature_dim", m.adapter.feature_dim);
    c.get("heads", m.adapter.heads);
    c.finish();
  }
  for (const char* key : {"recognition_prompt", "translation_prompt"}) {
    if (const json* p = s.child(key)) {
      if (!p->is_array()) throw ConfigError(s.path(key) + " must be an array");
      auto& dst = std::string(key) == "recognition_prompt" ? m.recognition_prompt
                                                           : m.translation_prompt;
      dst = p->get<data::TokenSequence>();
    }
  }
  s.finish();
  try {
    model::validate(m);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("invalid model config: ") + e.what());
  }
  return m;
}

namespace {

int parse_index(const std::string& text, const std::string& whole) {
  std::size_t used = 0;
  int v = -1;
  try {
    v = std::stoi(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (text.empty() || used != text.size() || v < 0) {
    throw ConfigError("malformed layer spec '" + whole + "'");
  }
  return v;
}

}  // namespace

LayerSpec parse_layer_spec(const std::string& text) {
  LayerSpec spec;
  if (text == "auto") {
    spec.automatic = true;
    return spec;
  }
  std::set<int> layers;
  std::stringstream in(text);
  std::string item;
  bool any = false;
  while (std::getline(in, item, ',')) {
    any = true;
    const auto dots = item.find("..");
    if (dots == std::string::npos) {
      layers.insert(parse_index(item, text));
      continue;
    }
    const int lo = parse_index(item.substr(0, dots), text);
    const int hi = parse_index(item.substr(dots + 2), text);
    if (hi < lo) throw ConfigError("empty layer range in '" + text + "'");
    for (int l = lo; l <= hi; ++l) layers.insert(l);
  }
  if (!any || text.back() == ',') throw ConfigError("malformed layer spec '" + text + "'");
  spec.layers.assign(layers.begin(), layers.end());
  return spec;
}

void check_layer_range(const std::vector<int>& layers, int num_layer) {
  for (int l : layers) {
    if (l < 0 || l > num_layer) {
      throw ConfigError("layer " + std::to_string(l) + " outside [0, " +
                        std::to_string(num_layer) + "] for this model");
    }
  }
}

int thread_count_from_env() {
  const char* raw = std::getenv("MODALIGN_THREADS");
  if (raw == nullptr || *raw == '\0') return 1;
  const std::string text(raw);
  std::size_t used = 0;
  int v = 0;
  try {
    v = std::stoi(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != text.size() || v < 1) {
    throw ConfigError("MODALIGN_THREADS must be a positive integer, got '" + text + "'");
  }
  return v;
}

RunLock::RunLock(const std::filesystem::path& dir) : file_(dir / kFileName) {
  std::filesystem::create_directories(dir);
  // "x" makes the open fail if the file already exists.
  std::FILE* f = std::fopen(file_.c_str(), "wx");
  if (f == nullptr) {
    const std::string where = file_.string();
    file_.clear();
    throw ConfigError("run directory is locked (" + where +
                      " exists; remove it if no other process is running)");
  }
  std::fclose(f);
}

RunLock::~RunLock() {
  if (!file_.empty()) {
    std::error_code ec;
    std::filesystem::remove(file_, ec);
  }
}

void save_model_checkpoint(const std::filesystem::path& path,
                           const model::ModelConfig& cfg,
                           const nn::ParameterStore<float>& params,
                           const std::string& stage, std::int64_t step) {
  ordered_json meta;
  meta["stage"] = stage;
  meta["step"] = step;
  meta["model"] = model_to_json(cfg);
  nn::save_checkpoint(path, params, meta.dump());
}

ModelCheckpoint load_model_checkpoint(const std::filesystem::path& path) {
  nn::Checkpoint raw = nn::load_checkpoint(path);
  json meta;
  try {
    meta = json::parse(raw.metadata);
  } catch (const json::exception&) {
    throw ConfigError("checkpoint " + path.string() + " has no model metadata");
  }
  if (!meta.is_object() || !meta.contains("model")) {
    throw ConfigError("checkpoint " + path.string() + " has no model metadata");
  }
  ModelCheckpoint out;
  out.config = model_from_json(meta.at("model"));
  out.stage = meta.value("stage", std::string());
  out.step = meta.value("step", std::int64_t{0});
  const auto reference = model::init_parameters(out.config, 0);
  if (reference.size() != raw.params.size()) {
    throw ConfigError("checkpoint " + path.string() + " holds " +
                      std::to_string(raw.params.size()) + " tensors, model expects " +
                      std::to_string(reference.size()));
  }
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const auto& want = reference.at(i);
    const auto& got = raw.params.at(i);
    if (want.name != got.name || want.value.rows() != got.value.rows() ||
        want.value.cols() != got.value.cols()) {
      throw ConfigError("checkpoint " + path.string() + " tensor '" + got.name +
                        "' does not match model tensor '" + want.name + "'");
    }
  }
  out.params = std::move(raw.params);
  return out;
}

}  // namespace modalign::config
