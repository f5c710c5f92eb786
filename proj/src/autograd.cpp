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

#include "modalign/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace modalign::nn {

// ---------------------------------------------------------------------------
// ParameterStore

template <typename Scalar>
void ParameterStore<Scalar>::add(std::string name, Matrix<Scalar> value) {
  if (index_.count(name) != 0) {
    throw NumericsError("duplicate parameter '" + name + "'");
  }
  index_.emplace(name, entries_.size());
  Matrix<Scalar> grad = Matrix<Scalar>::Zero(value.rows(), value.cols());
  entries_.push_back(Entry{std::move(name), std::move(value), std::move(grad)});
}

template <typename Scalar>
bool ParameterStore<Scalar>::contains(std::string_view name) const {
  return index_.count(std::string(name)) != 0;
}

template <typename Scalar>
std::size_t ParameterStore<Scalar>::index(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) {
    throw NumericsError("unknown parameter '" + std::string(name) + "'");
  }
  return it->second;
}

template <typename Scalar>
std::size_t ParameterStore<Scalar>::num_scalars() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += static_cast<std::size_t>(e.value.size());
  return n;
}

template <typename Scalar>
void ParameterStore<Scalar>::zero_grad() {
  for (auto& e : entries_) e.grad.setZero();
}

template <typename Scalar>
bool ParameterStore<Scalar>::all_finite() const {
  return std::all_of(entries_.begin(), entries_.end(),
                     [](const Entry& e) { return e.value.allFinite(); });
}

// ---------------------------------------------------------------------------
// Tape

template <typename Scalar>
Var<Scalar> Tape<Scalar>::constant(Mat value) {
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::param(ParameterStore<Scalar>& store,
                                std::string_view name) {
  const std::size_t i = store.index(name);
  Node node;
  node.value = store.at(i).value;
  node.requires_grad = record_;
  node.store = record_ ? &store : nullptr;
  node.param = i;
  nodes_.push_back(std::move(node));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::push(Mat value,
                               std::initializer_list<Var<Scalar>> parents,
                               BackwardFn fn) {
  return push(std::move(value),
              std::span<const Var<Scalar>>(parents.begin(), parents.size()),
              std::move(fn));
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::push(Mat value, std::span<const Var<Scalar>> parents,
                               BackwardFn fn) {
  Node node;
  node.value = std::move(value);
  if (record_) {
    node.requires_grad = std::any_of(
        parents.begin(), parents.end(),
        [this](const Var<Scalar>& p) { return nodes_[p.id].requires_grad; });
  }
  if (node.requires_grad) node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

template <typename Scalar>
typename Tape<Scalar>::Mat& Tape<Scalar>::grad(int id) {
  Node& node = nodes_[id];
  if (node.grad.size() == 0) {
    node.grad = Mat::Zero(node.value.rows(), node.value.cols());
  }
  return node.grad;
}

template <typename Scalar>
void Tape<Scalar>::backward(Var<Scalar> loss) {
  const Mat& v = value(loss.id);
  if (v.rows() != 1 || v.cols() != 1) {
    throw NumericsError("backward requires a 1x1 loss");
  }
  if (!std::isfinite(static_cast<double>(v(0, 0)))) {
    throw NumericsError("loss is not finite");
  }
  if (!requires_grad(loss.id)) return;
  grad(loss.id).setOnes();
  for (int id = loss.id; id >= 0; --id) {
    Node& node = nodes_[id];
    if (!node.requires_grad || node.grad.size() == 0) continue;
    if (node.store != nullptr) {
      node.store->at(node.param).grad += node.grad;
    } else if (node.backward) {
      node.backward(*this, id);
    }
  }
}

namespace {

template <typename Scalar>
void accumulate(Tape<Scalar>& t, int id, const Matrix<Scalar>& g) {
  if (t.requires_grad(id)) t.grad(id) += g;
}

template <typename Scalar>
void require_same_tape(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.tape != b.tape || a.tape == nullptr) {
    throw NumericsError("vars belong to different tapes");
  }
}

template <typename Scalar>
void softmax_rows_inplace(Matrix<Scalar>& s) {
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    const Scalar top = s.row(r).maxCoeff();
    s.row(r) = (s.row(r).array() - top).exp();
    s.row(r) /= s.row(r).sum();
  }
}

// Backward of P = softmax(S) by rows: dS = P * (dP - rowsum(dP * P)).
template <typename Scalar>
Matrix<Scalar> softmax_rows_backward(const Matrix<Scalar>& p,
                                     const Matrix<Scalar>& dp) {
  const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dot =
      (dp.array() * p.array()).rowwise().sum();
  return (p.array() * (dp.colwise() - dot).array()).matrix();
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise and linear ops

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  require_same_tape(a, b);
  if (a.cols() != b.rows()) throw NumericsError("matmul shape mismatch");
  Tape<Scalar>& t = *a.tape;
  return t.push(a.value() * b.value(), {a, b},
                [a = a.id, b = b.id](Tape<Scalar>& t, int self) {
                  const Matrix<Scalar>& g = t.grad(self);
                  if (t.requires_grad(a)) t.grad(a).noalias() += g * t.value(b).transpose();
                  if (t.requires_grad(b)) t.grad(b).noalias() += t.value(a).transpose() * g;
                });
}

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  require_same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw NumericsError("add shape mismatch");
  }
  return a.tape->push(a.value() + b.value(), {a, b},
                      [a = a.id, b = b.id](Tape<Scalar>& t, int self) {
                        const Matrix<Scalar> g = t.grad(self);
                        accumulate(t, a, g);
                        accumulate(t, b, g);
                      });
}

template <typename Scalar>
Var<Scalar> add_row(Var<Scalar> a, Var<Scalar> bias) {
  require_same_tape(a, bias);
  if (bias.rows() != 1 || bias.cols() != a.cols()) {
    throw NumericsError("add_row expects a 1xC bias");
  }
  Matrix<Scalar> out = a.value().rowwise() + bias.value().row(0);
  return a.tape->push(std::move(out), {a, bias},
                      [a = a.id, b = bias.id](Tape<Scalar>& t, int self) {
                        const Matrix<Scalar> g = t.grad(self);
                        accumulate(t, a, g);
                        if (t.requires_grad(b)) t.grad(b) += g.colwise().sum();
                      });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar s) {
  return a.tape->push(a.value() * s, {a},
                      [a = a.id, s](Tape<Scalar>& t, int self) {
                        t.grad(a) += t.grad(self) * s;
                      });
}

template <typename Scalar>
Var<Scalar> gelu(Var<Scalar> a) {
  const Scalar c = Scalar(std::sqrt(2.0 / 3.14159265358979323846));
  const Scalar k = Scalar(0.044715);
  const auto& x = a.value().array();
  const Matrix<Scalar> th = (c * (x + k * x.cube())).tanh().matrix();
  Matrix<Scalar> out = (Scalar(0.5) * x * (Scalar(1) + th.array())).matrix();
  return a.tape->push(std::move(out), {a},
                      [a = a.id, th, c, k](Tape<Scalar>& t, int self) {
                        const auto x = t.value(a).array();
                        const auto tt = th.array();
                        const auto d = Scalar(0.5) * (Scalar(1) + tt) +
                                       Scalar(0.5) * x * (Scalar(1) - tt * tt) * c *
                                           (Scalar(1) + Scalar(3) * k * x * x);
                        t.grad(a).array() += t.grad(self).array() * d;
                      });
}

template <typename Scalar>
Var<Scalar> layer_norm(Var<Scalar> x, Var<Scalar> gain, Var<Scalar> bias,
                       Scalar eps) {
  require_same_tape(x, gain);
  const Eigen::Index cols = x.cols();
  if (gain.rows() != 1 || gain.cols() != cols || bias.rows() != 1 ||
      bias.cols() != cols) {
    throw NumericsError("layer_norm expects 1xC gain and bias");
  }
  const Matrix<Scalar>& in = x.value();
  Matrix<Scalar> xhat(in.rows(), cols);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std(in.rows());
  for (Eigen::Index r = 0; r < in.rows(); ++r) {
    const Scalar mu = in.row(r).mean();
    const auto centered = (in.row(r).array() - mu);
    const Scalar var = centered.square().mean();
    inv_std(r) = Scalar(1) / std::sqrt(var + eps);
    xhat.row(r) = centered * inv_std(r);
  }
  Matrix<Scalar> out =
      (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  out.rowwise() += bias.value().row(0);
  return x.tape->push(
      std::move(out), {x, gain, bias},
      [xi = x.id, gi = gain.id, bi = bias.id, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](Tape<Scalar>& t, int self) {
        const Matrix<Scalar>& g = t.grad(self);
        if (t.requires_grad(gi)) {
          t.grad(gi) += (g.array() * xhat.array()).colwise().sum().matrix();
        }
        if (t.requires_grad(bi)) t.grad(bi) += g.colwise().sum();
        if (t.requires_grad(xi)) {
          const Matrix<Scalar> dxhat =
              (g.array().rowwise() * t.value(gi).row(0).array()).matrix();
          const auto n = static_cast<Scalar>(dxhat.cols());
          Matrix<Scalar>& dx = t.grad(xi);
          for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
            const Scalar m1 = dxhat.row(r).sum() / n;
            const Scalar m2 = dxhat.row(r).dot(xhat.row(r)) / n;
            dx.row(r).array() += inv_std(r) * (dxhat.row(r).array() - m1 -
                                               xhat.row(r).array() * m2);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Attention

template <typename Scalar>
Var<Scalar> causal_attention(Var<Scalar> q, Var<Scalar> k, Var<Scalar> v,
                             int heads) {
  require_same_tape(q, k);
  require_same_tape(q, v);
  const Eigen::Index steps = q.rows();
  const Eigen::Index dim = q.cols();
  if (k.rows() != steps || v.rows() != steps || k.cols() != dim ||
      v.cols() != dim || heads < 1 || dim % heads != 0) {
    throw NumericsError("causal_attention shape mismatch");
  }
  const Eigen::Index dh = dim / heads;
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  const Scalar neg_inf = -std::numeric_limits<Scalar>::infinity();

  auto probs = std::make_shared<std::vector<Matrix<Scalar>>>(heads);
  Matrix<Scalar> out(steps, dim);
  for (int h = 0; h < heads; ++h) {
    const auto qh = q.value().middleCols(h * dh, dh);
    const auto kh = k.value().middleCols(h * dh, dh);
    const auto vh = v.value().middleCols(h * dh, dh);
    Matrix<Scalar> s = (qh * kh.transpose()) * inv_sqrt;
    for (Eigen::Index i = 0; i < steps; ++i) {
      for (Eigen::Index j = i + 1; j < steps; ++j) s(i, j) = neg_inf;
    }
    softmax_rows_inplace(s);
    out.middleCols(h * dh, dh).noalias() = s * vh;
    (*probs)[h] = std::move(s);
  }
  return q.tape->push(
      std::move(out), {q, k, v},
      [qi = q.id, ki = k.id, vi = v.id, heads, dh, inv_sqrt, probs](
          Tape<Scalar>& t, int self) {
        const Matrix<Scalar>& g = t.grad(self);
        const Matrix<Scalar>& qv = t.value(qi);
        const Matrix<Scalar>& kv = t.value(ki);
        const Matrix<Scalar>& vv = t.value(vi);
        for (int h = 0; h < heads; ++h) {
          const Matrix<Scalar>& p = (*probs)[h];
          const auto gh = g.middleCols(h * dh, dh);
          if (t.requires_grad(vi)) {
            t.grad(vi).middleCols(h * dh, dh).noalias() += p.transpose() * gh;
          }
          const Matrix<Scalar> dp = gh * vv.middleCols(h * dh, dh).transpose();
          const Matrix<Scalar> ds = softmax_rows_backward(p, dp) * inv_sqrt;
          if (t.requires_grad(qi)) {
            t.grad(qi).middleCols(h * dh, dh).noalias() +=
                ds * kv.middleCols(h * dh, dh);
          }
          if (t.requires_grad(ki)) {
            t.grad(ki).middleCols(h * dh, dh).noalias() +=
                ds.transpose() * qv.middleCols(h * dh, dh);
          }
        }
      });
}

template <typename Scalar>
Var<Scalar> window_query_attention(Var<Scalar> queries, Var<Scalar> keys,
                                   Var<Scalar> values, int window, int heads) {
  require_same_tape(queries, keys);
  require_same_tape(queries, values);
  const Eigen::Index frames = keys.rows();
  const Eigen::Index dim = queries.cols();
  const Eigen::Index nq = queries.rows();
  if (frames < 1) throw NumericsError("window_query_attention: no frames");
  if (window < 1 || heads < 1 || dim % heads != 0 || keys.cols() != dim ||
      values.cols() != dim || values.rows() != frames) {
    throw NumericsError("window_query_attention shape mismatch");
  }
  const Eigen::Index windows = (frames + window - 1) / window;
  const Eigen::Index dh = dim / heads;
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

  // probs[w * heads + h] is N x len(w).
  auto probs = std::make_shared<std::vector<Matrix<Scalar>>>(windows * heads);
  Matrix<Scalar> out(windows * nq, dim);
  for (Eigen::Index w = 0; w < windows; ++w) {
    const Eigen::Index begin = w * window;
    const Eigen::Index len = std::min<Eigen::Index>(window, frames - begin);
    for (int h = 0; h < heads; ++h) {
      const auto qh = queries.value().middleCols(h * dh, dh);
      const auto kh = keys.value().block(begin, h * dh, len, dh);
      const auto vh = values.value().block(begin, h * dh, len, dh);
      Matrix<Scalar> s = (qh * kh.transpose()) * inv_sqrt;
      softmax_rows_inplace(s);
      out.block(w * nq, h * dh, nq, dh).noalias() = s * vh;
      (*probs)[w * heads + h] = std::move(s);
    }
  }
  return queries.tape->push(
      std::move(out), {queries, keys, values},
      [qi = queries.id, ki = keys.id, vi = values.id, window, heads, dh, nq,
       windows, frames, inv_sqrt, probs](Tape<Scalar>& t, int self) {
        const Matrix<Scalar>& g = t.grad(self);
        const Matrix<Scalar>& qv = t.value(qi);
        const Matrix<Scalar>& kv = t.value(ki);
        const Matrix<Scalar>& vv = t.value(vi);
        for (Eigen::Index w = 0; w < windows; ++w) {
          const Eigen::Index begin = w * window;
          const Eigen::Index len = std::min<Eigen::Index>(window, frames - begin);
          for (int h = 0; h < heads; ++h) {
            const Matrix<Scalar>& p = (*probs)[w * heads + h];
            const auto gh = g.block(w * nq, h * dh, nq, dh);
            if (t.requires_grad(vi)) {
              t.grad(vi).block(begin, h * dh, len, dh).noalias() +=
                  p.transpose() * gh;
            }
            const Matrix<Scalar> dp =
                gh * vv.block(begin, h * dh, len, dh).transpose();
            const Matrix<Scalar> ds = softmax_rows_backward(p, dp) * inv_sqrt;
            if (t.requires_grad(qi)) {
              t.grad(qi).middleCols(h * dh, dh).noalias() +=
                  ds * kv.block(begin, h * dh, len, dh);
            }
            if (t.requires_grad(ki)) {
              t.grad(ki).block(begin, h * dh, len, dh).noalias() +=
                  ds.transpose() * qv.middleCols(h * dh, dh);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Structural ops

template <typename Scalar>
Var<Scalar> slice_rows(Var<Scalar> a, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count < 0 || begin + count > a.rows()) {
    throw NumericsError("slice_rows out of range");
  }
  return a.tape->push(a.value().middleRows(begin, count), {a},
                      [a = a.id, begin, count](Tape<Scalar>& t, int self) {
                        t.grad(a).middleRows(begin, count) += t.grad(self);
                      });
}

template <typename Scalar>
Var<Scalar> concat_rows(std::span<const Var<Scalar>> parts) {
  if (parts.empty()) throw NumericsError("concat_rows of nothing");
  Tape<Scalar>& tape = *parts.front().tape;
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    require_same_tape(parts.front(), p);
    if (p.cols() != cols) throw NumericsError("concat_rows column mismatch");
    rows += p.rows();
  }
  Matrix<Scalar> out(rows, cols);
  std::vector<int> ids;
  std::vector<Eigen::Index> offsets;
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    ids.push_back(p.id);
    offsets.push_back(r);
    r += p.rows();
  }
  return tape.push(std::move(out), parts,
                   [ids = std::move(ids), offsets = std::move(offsets)](
                       Tape<Scalar>& t, int self) {
                     for (std::size_t i = 0; i < ids.size(); ++i) {
                       if (!t.requires_grad(ids[i])) continue;
                       Matrix<Scalar>& dst = t.grad(ids[i]);
                       dst += t.grad(self).middleRows(offsets[i], dst.rows());
                     }
                   });
}

template <typename Scalar>
Var<Scalar> gather_rows(Var<Scalar> table, std::span<const int> ids) {
  Matrix<Scalar> out(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table.rows()) {
      throw NumericsError("gather_rows index " + std::to_string(ids[i]) +
                          " out of range");
    }
    out.row(static_cast<Eigen::Index>(i)) = table.value().row(ids[i]);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return table.tape->push(std::move(out), {table},
                          [tb = table.id, idx = std::move(idx)](
                              Tape<Scalar>& t, int self) {
                            Matrix<Scalar>& dst = t.grad(tb);
                            const Matrix<Scalar>& g = t.grad(self);
                            for (std::size_t i = 0; i < idx.size(); ++i) {
                              dst.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
                            }
                          });
}

template <typename Scalar>
Var<Scalar> stop_gradient(Var<Scalar> a) {
  return a.tape->constant(a.value());
}

// ---------------------------------------------------------------------------
// Reductions and losses

template <typename Scalar>
Var<Scalar> cross_entropy(Var<Scalar> logits, std::span<const int> rows,
                          std::span<const int> labels) {
  if (rows.size() != labels.size() || rows.empty()) {
    throw NumericsError("cross_entropy needs matching, nonempty rows/labels");
  }
  const Matrix<Scalar>& z = logits.value();
  const Scalar inv = Scalar(1) / static_cast<Scalar>(rows.size());
  Scalar total = 0;
  Matrix<Scalar> dlogits = Matrix<Scalar>::Zero(z.rows(), z.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const int r = rows[i];
    const int y = labels[i];
    if (r < 0 || r >= z.rows() || y < 0 || y >= z.cols()) {
      throw NumericsError("cross_entropy index out of range");
    }
    const Scalar top = z.row(r).maxCoeff();
    const auto e = (z.row(r).array() - top).exp();
    const Scalar denom = e.sum();
    total += top + std::log(denom) - z(r, y);
    dlogits.row(r).array() += inv * e / denom;
    dlogits(r, y) -= inv;
  }
  Matrix<Scalar> out(1, 1);
  out(0, 0) = total * inv;
  return logits.tape->push(std::move(out), {logits},
                           [li = logits.id, d = std::move(dlogits)](
                               Tape<Scalar>& t, int self) {
                             t.grad(li) += d * t.grad(self)(0, 0);
                           });
}

template <typename Scalar>
Var<Scalar> wasserstein(Var<Scalar> source, Var<Scalar> target,
                        const ot::SolverConfig& cfg) {
  require_same_tape(source, target);
  ot::OtSolution sol = ot::transport(source.value(), target.value(), cfg);
  Matrix<Scalar> out(1, 1);
  out(0, 0) = static_cast<Scalar>(sol.distance);
  auto plan = std::make_shared<Eigen::MatrixXd>(std::move(sol.plan));
  // Only the source is a parent, so the target branch never sees a gradient.
  return source.tape->push(
      std::move(out), {source},
      [si = source.id, ti = target.id, plan](Tape<Scalar>& t, int self) {
        t.grad(si) += t.grad(self)(0, 0) *
                      ot::transport_gradient(t.value(si), t.value(ti), *plan);
      });
}

template <typename Scalar>
Var<Scalar> weighted_sum(std::span<const Var<Scalar>> terms,
                         std::span<const Scalar> weights) {
  if (terms.empty() || terms.size() != weights.size()) {
    throw NumericsError("weighted_sum needs matching, nonempty terms/weights");
  }
  Matrix<Scalar> out = Matrix<Scalar>::Zero(1, 1);
  std::vector<int> ids;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i].rows() != 1 || terms[i].cols() != 1) {
      throw NumericsError("weighted_sum terms must be 1x1");
    }
    out(0, 0) += weights[i] * terms[i].value()(0, 0);
    ids.push_back(terms[i].id);
  }
  std::vector<Scalar> w(weights.begin(), weights.end());
  return terms.front().tape->push(
      std::move(out), terms,
      [ids = std::move(ids), w = std::move(w)](Tape<Scalar>& t, int self) {
        const Scalar g = t.grad(self)(0, 0);
        for (std::size_t i = 0; i < ids.size(); ++i) {
          if (t.requires_grad(ids[i])) t.grad(ids[i])(0, 0) += w[i] * g;
        }
      });
}

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> a) {
  Matrix<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape->push(std::move(out), {a}, [a = a.id](Tape<Scalar>& t, int self) {
    t.grad(a).array() += t.grad(self)(0, 0);
  });
}

template <typename Scalar>
Var<Scalar> squared_norm(Var<Scalar> a) {
  Matrix<Scalar> out(1, 1);
  out(0, 0) = a.value().squaredNorm();
  return a.tape->push(std::move(out), {a}, [a = a.id](Tape<Scalar>& t, int self) {
    t.grad(a) += Scalar(2) * t.grad(self)(0, 0) * t.value(a);
  });
}

template <typename Scalar>
Var<Scalar> mean_rows(Var<Scalar> a) {
  if (a.rows() == 0) throw NumericsError("mean_rows of empty matrix");
  Matrix<Scalar> out = a.value().colwise().mean();
  return a.tape->push(std::move(out), {a}, [a = a.id](Tape<Scalar>& t, int self) {
    Matrix<Scalar>& dst = t.grad(a);
    const Scalar inv = Scalar(1) / static_cast<Scalar>(dst.rows());
    dst.rowwise() += t.grad(self).row(0) * inv;
  });
}

template <typename Scalar>
Var<Scalar> npair_loss(Var<Scalar> anchors, Var<Scalar> positives,
                       Scalar scale) {
  require_same_tape(anchors, positives);
  const Eigen::Index batch = anchors.rows();
  if (batch < 2 || positives.rows() != batch ||
      positives.cols() != anchors.cols()) {
    throw NumericsError("npair_loss needs a batch of >= 2 matching pairs");
  }
  const Scalar tiny = Scalar(1e-12);
  auto normalize = [tiny](const Matrix<Scalar>& x,
                          Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& norms) {
    norms = x.rowwise().norm().cwiseMax(tiny);
    return Matrix<Scalar>(norms.cwiseInverse().asDiagonal() * x);
  };
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> na, np;
  Matrix<Scalar> a = normalize(anchors.value(), na);
  Matrix<Scalar> p = normalize(positives.value(), np);
  Matrix<Scalar> s = scale * a * p.transpose();
  Scalar total = 0;
  for (Eigen::Index i = 0; i < batch; ++i) {
    const Scalar top = s.row(i).maxCoeff();
    total += top + std::log((s.row(i).array() - top).exp().sum()) - s(i, i);
  }
  softmax_rows_inplace(s);
  Matrix<Scalar> ds = (s - Matrix<Scalar>::Identity(batch, batch)) /
                      static_cast<Scalar>(batch);
  Matrix<Scalar> out(1, 1);
  out(0, 0) = total / static_cast<Scalar>(batch);
  return anchors.tape->push(
      std::move(out), {anchors, positives},
      [ai = anchors.id, pi = positives.id, a = std::move(a), p = std::move(p),
       na = std::move(na), np = std::move(np), ds = std::move(ds),
       scale](Tape<Scalar>& t, int self) {
        const Scalar g = t.grad(self)(0, 0);
        // Through x -> x / |x|: dx = (dn - n (n . dn)) / |x|.
        auto unnormalize = [](const Matrix<Scalar>& n, const Matrix<Scalar>& dn,
                              const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& norms) {
          const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dots =
              (n.array() * dn.array()).rowwise().sum();
          return Matrix<Scalar>(
              norms.cwiseInverse().asDiagonal() *
              (dn - Matrix<Scalar>(dots.asDiagonal() * n)));
        };
        if (t.requires_grad(ai)) {
          const Matrix<Scalar> da = g * scale * ds * p;
          t.grad(ai) += unnormalize(a, da, na);
        }
        if (t.requires_grad(pi)) {
          const Matrix<Scalar> dp = g * scale * ds.transpose() * a;
          t.grad(pi) += unnormalize(p, dp, np);
        }
      });
}

// ---------------------------------------------------------------------------
// Instantiations

#define MODALIGN_INSTANTIATE(S)                                                \
  template class ParameterStore<S>;                                            \
  template class Tape<S>;                                                      \
  template Var<S> matmul(Var<S>, Var<S>);                                      \
  template Var<S> add(Var<S>, Var<S>);                                         \
  template Var<S> add_row(Var<S>, Var<S>);                                     \
  template Var<S> scale(Var<S>, S);                                            \
  template Var<S> gelu(Var<S>);                                                \
  template Var<S> layer_norm(Var<S>, Var<S>, Var<S>, S);                       \
  template Var<S> causal_attention(Var<S>, Var<S>, Var<S>, int);               \
  template Var<S> window_query_attention(Var<S>, Var<S>, Var<S>, int, int);    \
  template Var<S> slice_rows(Var<S>, Eigen::Index, Eigen::Index);              \
  template Var<S> concat_rows(std::span<const Var<S>>);                        \
  template Var<S> gather_rows(Var<S>, std::span<const int>);                   \
  template Var<S> cross_entropy(Var<S>, std::span<const int>,                  \
                                std::span<const int>);                         \
  template Var<S> stop_gradient(Var<S>);                                       \
  template Var<S> wasserstein(Var<S>, Var<S>, const ot::SolverConfig&);        \
  template Var<S> weighted_sum(std::span<const Var<S>>, std::span<const S>);   \
  template Var<S> sum(Var<S>);                                                 \
  template Var<S> squared_norm(Var<S>);                                        \
  template Var<S> mean_rows(Var<S>);                                           \
  template Var<S> npair_loss(Var<S>, Var<S>, S);

MODALIGN_INSTANTIATE(float)
MODALIGN_INSTANTIATE(double)

#undef MODALIGN_INSTANTIATE

}  // namespace modalign::nn
