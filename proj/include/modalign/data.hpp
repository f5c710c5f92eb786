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

// Synthetic paired speech/text corpus and its on-disk formats.
//
// Feature file (".mbft"), little-endian:
//   magic "MBFT", version u32 = 1, n_frames u32, dim u32,
//   n_frames * dim float32 values, row-major.
//
// Manifest (one per split: train.tsv, valid.tsv, test.tsv), one record per
// line, tab-separated:
//   id <TAB> feature path <TAB> transcript ids <TAB> target ids
// Token ids inside a field are separated by single spaces. Relative feature
// paths resolve against the manifest's directory.

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace modalign::data {

using TokenSequence = std::vector<int>;
// n_frames x feature_dim.
using FeatureSequence = Eigen::MatrixXf;

inline constexpr std::uint32_t kFeatureVersion = 1;

struct PairedSample {
  std::string id;
  FeatureSequence speech;
  TokenSequence transcript;
  TokenSequence target;
  TokenSequence instruction;
};

struct ManifestRecord {
  std::string id;
  std::filesystem::path features;
  TokenSequence transcript;
  TokenSequence target;
};

struct CorpusManifest {
  std::string split;
  std::vector<ManifestRecord> records;
};

struct SynthConfig {
  int vocab_size = 64;
  int min_tokens = 4;
  int max_tokens = 16;
  // Centered on the adapter window so one speech token covers about one
  // transcript token.
  int min_frames_per_token = 12;
  int max_frames_per_token = 22;
  int feature_dim = 16;
  double noise = 0.1;
  int size = 2000;
  double valid_fraction = 0.1;
  double test_fraction = 0.1;
};

struct SyntheticCorpus {
  SynthConfig config;
  // vocab_size x feature_dim acoustic prototype per token.
  Eigen::MatrixXf prototypes;
  // target token = translation[transcript token]; a permutation.
  std::vector<int> translation;
  std::vector<PairedSample> train;
  std::vector<PairedSample> valid;
  std::vector<PairedSample> test;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void validate(const SynthConfig& cfg);

// Deterministic in (seed, cfg). Samples carry no instruction.
SyntheticCorpus synthesize_corpus(std::uint64_t seed, const SynthConfig& cfg);

// Writes feature files under dir/features and the three split manifests.
// Returns the manifests in train, valid, test order.
std::vector<CorpusManifest> write_corpus(const std::filesystem::path& dir,
                                         const SyntheticCorpus& corpus);

void write_feature_file(const std::filesystem::path& path,
                        const FeatureSequence& features);
FeatureSequence read_feature_file(const std::filesystem::path& path);

void write_manifest(const std::filesystem::path& path,
                    const CorpusManifest& manifest);
CorpusManifest read_manifest(const std::filesystem::path& path,
                             const std::string& split);

// Loads every record's features. Throws when ids repeat or a file is missing.
std::vector<PairedSample> load_samples(const CorpusManifest& manifest);

// Loads dir/<split>.tsv.
std::vector<PairedSample> load_split(const std::filesystem::path& dir,
                                     const std::string& split);

// Index of the prototype nearest to each frame.
std::vector<int> nearest_prototype(const FeatureSequence& frames,
                                   const Eigen::MatrixXf& prototypes);

std::string format_tokens(const TokenSequence& tokens);
TokenSequence parse_tokens(const std::string& text);

}  // namespace modalign::data
