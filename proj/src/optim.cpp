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

#include "modalign/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace modalign::nn {

double learning_rate(const ScheduleConfig& cfg, std::int64_t step) {
  if (step < 0) step = 0;
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) {
    const double frac =
        static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    return cfg.warmup_start + (cfg.peak - cfg.warmup_start) * frac;
  }
  const std::int64_t span = cfg.total_steps - cfg.warmup_steps;
  if (span <= 0) return cfg.peak;
  const double progress = std::min(
      1.0, static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(span));
  return cfg.floor +
         0.5 * (cfg.peak - cfg.floor) * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename Scalar>
void optimizer_step(ParameterStore<Scalar>& store, OptimizerState<Scalar>& state,
                    const AdamWConfig& adam, const ScheduleConfig& schedule) {
  if (state.first_moment.size() != store.size()) {
    state.first_moment.clear();
    state.second_moment.clear();
    for (std::size_t i = 0; i < store.size(); ++i) {
      const auto& v = store.at(i).value;
      state.first_moment.push_back(Matrix<Scalar>::Zero(v.rows(), v.cols()));
      state.second_moment.push_back(Matrix<Scalar>::Zero(v.rows(), v.cols()));
    }
  }

  double norm2 = 0.0;
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& g = store.at(i).grad;
    if (!g.allFinite()) {
      throw NumericsError("non-finite gradient for '" + store.at(i).name + "'");
    }
    norm2 += static_cast<double>(g.squaredNorm());
  }
  Scalar clip = 1;
  if (adam.grad_clip > 0.0 && std::sqrt(norm2) > adam.grad_clip) {
    clip = static_cast<Scalar>(adam.grad_clip / std::sqrt(norm2));
  }

  const double lr = learning_rate(schedule, state.step);
  ++state.step;
  const auto t = static_cast<double>(state.step);
  const auto b1 = static_cast<Scalar>(adam.beta1);
  const auto b2 = static_cast<Scalar>(adam.beta2);
  const auto corr1 = static_cast<Scalar>(1.0 - std::pow(adam.beta1, t));
  const auto corr2 = static_cast<Scalar>(1.0 - std::pow(adam.beta2, t));
  const auto eps = static_cast<Scalar>(adam.eps);
  const auto step_lr = static_cast<Scalar>(lr);
  const auto decay = static_cast<Scalar>(lr * adam.weight_decay);

  for (std::size_t i = 0; i < store.size(); ++i) {
    auto& e = store.at(i);
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    const Matrix<Scalar> g = e.grad * clip;
    m = b1 * m + (Scalar(1) - b1) * g;
    v = b2 * v + (Scalar(1) - b2) * g.cwiseProduct(g);
    if (e.value.rows() > 1 && decay != Scalar(0)) e.value -= decay * e.value;
    e.value.array() -= step_lr * (m.array() / corr1) /
                       ((v.array() / corr2).sqrt() + eps);
    if (!e.value.allFinite()) {
      throw NumericsError("non-finite parameter '" + e.name + "' after update");
    }
  }
}

template void optimizer_step(ParameterStore<float>&, OptimizerState<float>&,
                             const AdamWConfig&, const ScheduleConfig&);
template void optimizer_step(ParameterStore<double>&, OptimizerState<double>&,
                             const AdamWConfig&, const ScheduleConfig&);

EarlyStopping::EarlyStopping(int patience) : patience_(patience) {
  if (patience < 1) throw NumericsError("early-stop patience must be >= 1");
}

bool EarlyStopping::update(double metric) {
  improved_last_ = metric > best_;
  if (improved_last_) {
    best_ = metric;
    best_index_ = seen_;
    stale_ = 0;
  } else {
    ++stale_;
  }
  ++seen_;
  return stale_ >= patience_;
}

}  // namespace modalign::nn
