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

#include "modalign/data.hpp"

#include "modalign/binary_io.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace modalign::data {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kMaxFeatureScalars = 1ull << 28;

}  // namespace

void validate(const SynthConfig& cfg) {
  if (cfg.vocab_size < 2) throw DataError("vocab_size must be >= 2");
  if (cfg.min_tokens < 1 || cfg.max_tokens < cfg.min_tokens) {
    throw DataError("invalid token length range");
  }
  if (cfg.min_frames_per_token < 1 ||
      cfg.max_frames_per_token < cfg.min_frames_per_token) {
    throw DataError("invalid frames-per-token range");
  }
  if (cfg.feature_dim < 1) throw DataError("feature_dim must be >= 1");
  if (!(cfg.noise >= 0.0)) throw DataError("noise must be >= 0");
  if (cfg.size < 1) throw DataError("size must be >= 1");
  if (cfg.valid_fraction < 0 || cfg.test_fraction < 0 ||
      cfg.valid_fraction + cfg.test_fraction >= 1.0) {
    throw DataError("invalid split fractions");
  }
}

SyntheticCorpus synthesize_corpus(std::uint64_t seed, const SynthConfig& cfg) {
  validate(cfg);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> gauss(0.0f, 1.0f);

  SyntheticCorpus corpus;
  corpus.config = cfg;
  corpus.prototypes.resize(cfg.vocab_size, cfg.feature_dim);
  for (int v = 0; v < cfg.vocab_size; ++v) {
    for (int d = 0; d < cfg.feature_dim; ++d) corpus.prototypes(v, d) = gauss(rng);
  }
  corpus.translation.resize(cfg.vocab_size);
  std::iota(corpus.translation.begin(), corpus.translation.end(), 0);
  std::shuffle(corpus.translation.begin(), corpus.translation.end(), rng);

  std::uniform_int_distribution<int> length(cfg.min_tokens, cfg.max_tokens);
  std::uniform_int_distribution<int> token(0, cfg.vocab_size - 1);
  std::uniform_int_distribution<int> repeat(cfg.min_frames_per_token,
                                            cfg.max_frames_per_token);
  const auto noise = static_cast<float>(cfg.noise);

  const int n_valid = static_cast<int>(cfg.size * cfg.valid_fraction);
  const int n_test = static_cast<int>(cfg.size * cfg.test_fraction);
  const int n_train = cfg.size - n_valid - n_test;

  for (int s = 0; s < cfg.size; ++s) {
    PairedSample sample;
    char id[32];
    std::snprintf(id, sizeof(id), "utt%06d", s);
    sample.id = id;
    const int len = length(rng);
    std::vector<int> frames_per_token(len);
    int n_frames = 0;
    for (int i = 0; i < len; ++i) {
      sample.transcript.push_back(token(rng));
      frames_per_token[i] = repeat(rng);
      n_frames += frames_per_token[i];
    }
    for (int t : sample.transcript) sample.target.push_back(corpus.translation[t]);
    sample.speech.resize(n_frames, cfg.feature_dim);
    int row = 0;
    for (int i = 0; i < len; ++i) {
      for (int k = 0; k < frames_per_token[i]; ++k, ++row) {
        sample.speech.row(row) = corpus.prototypes.row(sample.transcript[i]);
        if (noise > 0.0f) {
          for (int d = 0; d < cfg.feature_dim; ++d) {
            sample.speech(row, d) += noise * gauss(rng);
          }
        }
      }
    }
    if (s < n_train) {
      corpus.train.push_back(std::move(sample));
    } else if (s < n_train + n_valid) {
      corpus.valid.push_back(std::move(sample));
    } else {
      corpus.test.push_back(std::move(sample));
    }
  }
  return corpus;
}

std::vector<CorpusManifest> write_corpus(const fs::path& dir,
                                         const SyntheticCorpus& corpus) {
  fs::create_directories(dir / "features");
  std::vector<CorpusManifest> out;
  const std::pair<const char*, const std::vector<PairedSample>*> splits[] = {
      {"train", &corpus.train}, {"valid", &corpus.valid}, {"test", &corpus.test}};
  for (const auto& [name, samples] : splits) {
    CorpusManifest manifest;
    manifest.split = name;
    for (const auto& s : *samples) {
      const fs::path rel = fs::path("features") / (s.id + ".mbft");
      write_feature_file(dir / rel, s.speech);
      manifest.records.push_back({s.id, rel, s.transcript, s.target});
    }
    write_manifest(dir / (std::string(name) + ".tsv"), manifest);
    out.push_back(std::move(manifest));
  }
  return out;
}

void write_feature_file(const fs::path& path, const FeatureSequence& features) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out.write("MBFT", 4);
  io::write_u32(out, kFeatureVersion);
  io::write_u32(out, static_cast<std::uint32_t>(features.rows()));
  io::write_u32(out, static_cast<std::uint32_t>(features.cols()));
  for (Eigen::Index r = 0; r < features.rows(); ++r) {
    for (Eigen::Index c = 0; c < features.cols(); ++c) io::write_f32(out, features(r, c));
  }
  if (!out) throw DataError("write failed for " + path.string());
}

FeatureSequence read_feature_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open feature file " + path.string());
  io::expect_magic(in, "MBFT");
  const std::uint32_t version = io::read_u32(in, "version");
  if (version != kFeatureVersion) {
    throw io::FormatError("unsupported feature file version " + std::to_string(version));
  }
  const std::uint32_t rows = io::read_u32(in, "n_frames");
  const std::uint32_t cols = io::read_u32(in, "dim");
  if (static_cast<std::uint64_t>(rows) * cols > kMaxFeatureScalars) {
    throw io::FormatError("feature shape overflow");
  }
  FeatureSequence features(rows, cols);
  for (std::uint32_t r = 0; r < rows; ++r) {
    for (std::uint32_t c = 0; c < cols; ++c) features(r, c) = io::read_f32(in, "payload");
  }
  return features;
}

std::string format_tokens(const TokenSequence& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += std::to_string(tokens[i]);
  }
  return out;
}

TokenSequence parse_tokens(const std::string& text) {
  TokenSequence out;
  std::istringstream in(text);
  std::string word;
  while (in >> word) {
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(word, &used);
    } catch (const std::exception&) {
      throw DataError("invalid token id '" + word + "'");
    }
    if (used != word.size() || v < 0) throw DataError("invalid token id '" + word + "'");
    out.push_back(v);
  }
  return out;
}

void write_manifest(const fs::path& path, const CorpusManifest& manifest) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  for (const auto& r : manifest.records) {
    out << r.id << '\t' << r.features.generic_string() << '\t'
        << format_tokens(r.transcript) << '\t' << format_tokens(r.target) << '\n';
  }
}

CorpusManifest read_manifest(const fs::path& path, const std::string& split) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  CorpusManifest manifest;
  manifest.split = split;
  std::set<std::string> seen;
  std::string line;
  int lineno = 0;
  const fs::path base = path.parent_path();
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (std::size_t tab; (tab = line.find('\t', start)) != std::string::npos;
         start = tab + 1) {
      fields.push_back(line.substr(start, tab - start));
    }
    fields.push_back(line.substr(start));
    if (fields.size() != 4) {
      throw DataError(path.string() + ":" + std::to_string(lineno) +
                      ": expected 4 tab-separated fields");
    }
    ManifestRecord rec;
    rec.id = fields[0];
    if (!seen.insert(rec.id).second) {
      throw DataError(path.string() + ": duplicate id '" + rec.id + "'");
    }
    rec.features = fs::path(fields[1]);
    if (rec.features.is_relative()) rec.features = base / rec.features;
    rec.transcript = parse_tokens(fields[2]);
    rec.target = parse_tokens(fields[3]);
    if (rec.transcript.empty() || rec.target.empty()) {
      throw DataError(path.string() + ":" + std::to_string(lineno) +
                      ": transcript and target must be nonempty");
    }
    manifest.records.push_back(std::move(rec));
  }
  return manifest;
}

std::vector<PairedSample> load_samples(const CorpusManifest& manifest) {
  std::vector<PairedSample> out;
  out.reserve(manifest.records.size());
  for (const auto& r : manifest.records) {
    if (!fs::exists(r.features)) {
      throw DataError("missing feature file " + r.features.string());
    }
    PairedSample s;
    s.id = r.id;
    s.speech = read_feature_file(r.features);
    if (s.speech.rows() < 1) throw DataError("empty feature file for " + r.id);
    s.transcript = r.transcript;
    s.target = r.target;
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<PairedSample> load_split(const fs::path& dir, const std::string& split) {
  return load_samples(read_manifest(dir / (split + ".tsv"), split));
}

std::vector<int> nearest_prototype(const FeatureSequence& frames,
                                   const Eigen::MatrixXf& prototypes) {
  std::vector<int> out(frames.rows());
  for (Eigen::Index r = 0; r < frames.rows(); ++r) {
    Eigen::Index best = 0;
    (prototypes.rowwise() - frames.row(r)).rowwise().squaredNorm().minCoeff(&best);
    out[r] = static_cast<int>(best);
  }
  return out;
}

}  // namespace modalign::data
