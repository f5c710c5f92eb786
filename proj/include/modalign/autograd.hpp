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

// Reverse-mode differentiation over dense Eigen matrices.
//
// A Tape records one forward evaluation as a list of nodes. Each node keeps
// its value and, when any input requires a gradient, a backward closure that
// pushes the node's gradient into its inputs. Parameters live in a
// ParameterStore; Tape::backward accumulates into the store's gradient slots.
//
// Every op is a free function so model code reads like the math:
//   auto h = layer_norm(x, tape.param(store, "ln.g"), tape.param(store, "ln.b"));

#include "modalign/ot.hpp"

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace modalign::nn {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

class NumericsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Named parameter tensors with matching-shape gradient accumulators. Entry
// order is insertion order and is what checkpoints serialize.
template <typename Scalar>
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Matrix<Scalar> value;
    Matrix<Scalar> grad;
  };

  void add(std::string name, Matrix<Scalar> value);
  bool contains(std::string_view name) const;
  std::size_t index(std::string_view name) const;

  Matrix<Scalar>& value(std::string_view name) { return at(index(name)).value; }
  const Matrix<Scalar>& value(std::string_view name) const {
    return at(index(name)).value;
  }
  Matrix<Scalar>& grad(std::string_view name) { return at(index(name)).grad; }

  Entry& at(std::size_t i) { return entries_.at(i); }
  const Entry& at(std::size_t i) const { return entries_.at(i); }
  std::size_t size() const { return entries_.size(); }
  std::size_t num_scalars() const;

  void zero_grad();
  bool all_finite() const;

  template <typename Other>
  ParameterStore<Other> cast() const {
    ParameterStore<Other> out;
    for (const auto& e : entries_) out.add(e.name, e.value.template cast<Other>());
    return out;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <typename Scalar>
class Tape;

// Handle to a node on a tape.
template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  int id = -1;

  const Matrix<Scalar>& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;
  using BackwardFn = std::function<void(Tape&, int self)>;

  // With record = false, parameters enter as constants and no backward
  // closures are kept (inference mode).
  explicit Tape(bool record = true) : record_(record) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Scalar> constant(Mat value);
  Var<Scalar> param(ParameterStore<Scalar>& store, std::string_view name);

  // Appends a node; `fn` is dropped when no parent requires a gradient.
  Var<Scalar> push(Mat value, std::initializer_list<Var<Scalar>> parents,
                   BackwardFn fn);
  Var<Scalar> push(Mat value, std::span<const Var<Scalar>> parents,
                   BackwardFn fn);

  const Mat& value(int id) const { return nodes_[id].value; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  // Gradient slot of node `id`, allocated as zeros on first access.
  Mat& grad(int id);

  // Seeds d(loss)/d(loss) = 1 and runs every recorded closure in reverse.
  // Throws NumericsError when the loss is not a finite 1x1 value.
  void backward(Var<Scalar> loss);

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    BackwardFn backward;
    bool requires_grad = false;
    ParameterStore<Scalar>* store = nullptr;
    std::size_t param = 0;
  };

  bool record_;
  std::vector<Node> nodes_;
};

template <typename Scalar>
const Matrix<Scalar>& Var<Scalar>::value() const {
  return tape->value(id);
}

// ---------------------------------------------------------------------------
// Ops. Shapes are (rows, cols); sequences are rows.

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b);

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b);

// a + broadcast of 1xC row `bias` over every row of a.
template <typename Scalar>
Var<Scalar> add_row(Var<Scalar> a, Var<Scalar> bias);

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar s);

// tanh approximation.
template <typename Scalar>
Var<Scalar> gelu(Var<Scalar> a);

// Row-wise normalization with 1xC gain and bias.
template <typename Scalar>
Var<Scalar> layer_norm(Var<Scalar> x, Var<Scalar> gain, Var<Scalar> bias,
                       Scalar eps = Scalar(1e-5));

// Multi-head scaled dot-product attention with a causal mask. q, k, v are
// T x D with D divisible by `heads`.
template <typename Scalar>
Var<Scalar> causal_attention(Var<Scalar> q, Var<Scalar> k, Var<Scalar> v,
                             int heads);

// Learned-query attention pooled per window. `queries` is N x D; keys and
// values are F x D (one row per frame). Frames are split into consecutive
// windows of `window` frames (the last one may be shorter); each window
// yields N rows. Output is ceil(F / window) * N x D.
template <typename Scalar>
Var<Scalar> window_query_attention(Var<Scalar> queries, Var<Scalar> keys,
                                   Var<Scalar> values, int window, int heads);

// Rows [begin, begin + count).
template <typename Scalar>
Var<Scalar> slice_rows(Var<Scalar> a, Eigen::Index begin, Eigen::Index count);

template <typename Scalar>
Var<Scalar> concat_rows(std::span<const Var<Scalar>> parts);

// Rows of `table` selected by `ids`.
template <typename Scalar>
Var<Scalar> gather_rows(Var<Scalar> table, std::span<const int> ids);

// Mean negative log-likelihood of labels[i] under softmax(logits.row(rows[i])).
template <typename Scalar>
Var<Scalar> cross_entropy(Var<Scalar> logits, std::span<const int> rows,
                          std::span<const int> labels);

// Same value, no gradient flows back through it.
template <typename Scalar>
Var<Scalar> stop_gradient(Var<Scalar> a);

// Wasserstein distance between the rows of `source` and the rows of
// `target`. The optimal plan is held fixed in the backward pass and `target`
// never receives a gradient.
template <typename Scalar>
Var<Scalar> wasserstein(Var<Scalar> source, Var<Scalar> target,
                        const ot::SolverConfig& cfg);

// sum_k weights[k] * terms[k] over 1x1 terms.
template <typename Scalar>
Var<Scalar> weighted_sum(std::span<const Var<Scalar>> terms,
                         std::span<const Scalar> weights);

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> a);

template <typename Scalar>
Var<Scalar> squared_norm(Var<Scalar> a);

// 1 x C mean over rows.
template <typename Scalar>
Var<Scalar> mean_rows(Var<Scalar> a);

// Multi-class N-pair loss: row i of `anchors` should score its own row of
// `positives` above every other row. Similarity is the scaled dot product of
// L2-normalized rows.
template <typename Scalar>
Var<Scalar> npair_loss(Var<Scalar> anchors, Var<Scalar> positives,
                       Scalar scale);

}  // namespace modalign::nn
