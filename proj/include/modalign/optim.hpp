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

#include "modalign/autograd.hpp"

#include <cstdint>
#include <limits>
#include <vector>

namespace modalign::nn {

// Linear warmup from warmup_start to peak, then cosine decay to floor at
// total_steps. Steps past total_steps stay at floor.
struct ScheduleConfig {
  double warmup_start = 1e-6;
  double peak = 3e-5;
  double floor = 1e-5;
  std::int64_t warmup_steps = 9000;
  std::int64_t total_steps = 80000;
};

double learning_rate(const ScheduleConfig& cfg, std::int64_t step);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Decoupled; applied to matrices only, never to 1xC gains and biases.
  double weight_decay = 0.05;
  // Global L2 norm clip; <= 0 disables.
  double grad_clip = 1.0;
};

template <typename Scalar>
struct OptimizerState {
  std::int64_t step = 0;
  std::vector<Matrix<Scalar>> first_moment;
  std::vector<Matrix<Scalar>> second_moment;
};

// One AdamW update with the learning rate for state.step, then advances the
// step. Throws NumericsError on a non-finite gradient or parameter.
template <typename Scalar>
void optimizer_step(ParameterStore<Scalar>& store, OptimizerState<Scalar>& state,
                    const AdamWConfig& adam, const ScheduleConfig& schedule);

// Stops once `patience` consecutive validations fail to exceed the best
// value seen so far.
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience);

  // Records one validation; returns true when training should stop.
  bool update(double metric);

  double best() const { return best_; }
  int best_index() const { return best_index_; }
  int stale() const { return stale_; }
  bool improved_last() const { return improved_last_; }

 private:
  int patience_;
  int seen_ = 0;
  int stale_ = 0;
  int best_index_ = -1;
  bool improved_last_ = false;
  double best_ = -std::numeric_limits<double>::infinity();
};

}  // namespace modalign::nn
