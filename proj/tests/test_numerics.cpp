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
#include "modalign/checkpoint.hpp"
#include "modalign/optim.hpp"

#include "test_support.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <vector>

using namespace modalign;
using Eigen::MatrixXd;
using nn::Tape;
using nn::Var;

namespace {

using Store = nn::ParameterStore<double>;
using LossFn = std::function<Var<double>(Tape<double>&, Store&)>;

// Probe an op's full Jacobian by reducing its output through a random
// quadratic: loss = ||out + offset||^2.
LossFn probe(std::function<Var<double>(Tape<double>&, Store&)> op, Eigen::Index rows,
             Eigen::Index cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const MatrixXd offset = testing::random_matrix(rng, rows, cols);
  return [op, offset](Tape<double>& tape, Store& s) {
    return nn::squared_norm(nn::add(op(tape, s), tape.constant(offset)));
  };
}

void require_gradients(Store& store, const LossFn& loss, std::uint64_t seed,
                       int min_total = 40) {
  const auto r = testing::check_gradients(store, loss, seed, 3, min_total);
  INFO("worst coordinate " << r.worst_name << " rel err " << r.worst_rel_err);
  CHECK(r.failures == 0);
  CHECK(r.coordinates >= min_total);
}

Store random_store(std::uint64_t seed,
                   std::initializer_list<std::tuple<const char*, int, int>> shapes) {
  std::mt19937_64 rng(seed);
  Store s;
  for (const auto& [name, r, c] : shapes) s.add(name, testing::random_matrix(rng, r, c));
  return s;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("modalign_test_" + name);
}

}  // namespace

TEST_SUITE("numerics") {

TEST_CASE("backward of a sum is all ones") {
  Store s = random_store(1, {{"p", 3, 4}});
  Tape<double> tape;
  tape.backward(nn::sum(tape.param(s, "p")));
  CHECK(s.grad("p").isApprox(MatrixXd::Ones(3, 4)));
}

TEST_CASE("backward of a squared norm is twice the parameter") {
  Store s = random_store(2, {{"p", 2, 5}});
  Tape<double> tape;
  tape.backward(nn::squared_norm(tape.param(s, "p")));
  CHECK(s.grad("p").isApprox(2.0 * s.value("p")));
}

TEST_CASE("gradients accumulate across backward passes until zeroed") {
  Store s = random_store(3, {{"p", 2, 2}});
  for (int k = 0; k < 2; ++k) {
    Tape<double> tape;
    tape.backward(nn::sum(tape.param(s, "p")));
  }
  CHECK(s.grad("p").isApprox(MatrixXd::Constant(2, 2, 2.0)));
  s.zero_grad();
  CHECK(s.grad("p").isZero(0.0));
}

TEST_CASE("non-finite or non-scalar loss is rejected") {
  Store s;
  s.add("p", MatrixXd::Constant(1, 1, std::numeric_limits<double>::infinity()));
  Tape<double> tape;
  CHECK_THROWS_AS(tape.backward(nn::sum(tape.param(s, "p"))), nn::NumericsError);
  Tape<double> tape2;
  Store t = random_store(4, {{"q", 2, 2}});
  CHECK_THROWS_AS(tape2.backward(tape2.param(t, "q")), nn::NumericsError);
}

TEST_CASE("stop_gradient passes the value and blocks the gradient") {
  Store s = random_store(5, {{"p", 2, 3}});
  Tape<double> tape;
  const auto p = tape.param(s, "p");
  const auto frozen = nn::stop_gradient(p);
  CHECK(frozen.value() == p.value());
  CHECK_FALSE(tape.requires_grad(frozen.id));
  tape.backward(nn::add(nn::sum(p), nn::squared_norm(frozen)));
  CHECK(s.grad("p").isApprox(MatrixXd::Ones(2, 3)));
}

TEST_CASE("inference tapes record no gradients") {
  Store s = random_store(6, {{"p", 2, 2}});
  Tape<double> tape(false);
  const auto p = tape.param(s, "p");
  CHECK_FALSE(tape.requires_grad(p.id));
}

TEST_CASE("parameter store bookkeeping") {
  Store s = random_store(7, {{"a", 2, 3}, {"b", 1, 4}});
  CHECK(s.size() == 2);
  CHECK(s.num_scalars() == 10);
  CHECK(s.contains("a"));
  CHECK_FALSE(s.contains("c"));
  CHECK(s.index("b") == 1);
  CHECK(s.grad("a").rows() == 2);
  CHECK(s.grad("a").cols() == 3);
  CHECK(s.all_finite());
  CHECK_THROWS(s.add("a", MatrixXd::Zero(1, 1)));
  CHECK_THROWS(s.index("missing"));
  const auto f = s.cast<float>();
  CHECK(f.value("a").isApprox(s.value("a").cast<float>()));
}

TEST_CASE("dense ops match finite differences") {
  Store s = random_store(8, {{"a", 3, 4}, {"b", 4, 2}, {"c", 3, 4}, {"bias", 1, 4}});
  SUBCASE("matmul") {
    require_gradients(s, probe([](auto& t, auto& st) {
      return nn::matmul(t.param(st, "a"), t.param(st, "b"));
    }, 3, 2, 1), 1);
  }
  SUBCASE("add, add_row, scale") {
    require_gradients(s, probe([](auto& t, auto& st) {
      return nn::scale(nn::add_row(nn::add(t.param(st, "a"), t.param(st, "c")),
                                   t.param(st, "bias")), -1.7);
    }, 3, 4, 2), 2);
  }
  SUBCASE("gelu") {
    require_gradients(s, probe([](auto& t, auto& st) {
      return nn::gelu(t.param(st, "a"));
    }, 3, 4, 3), 3);
  }
  SUBCASE("layer_norm") {
    Store ln = random_store(9, {{"x", 5, 6}, {"g", 1, 6}, {"b", 1, 6}});
    require_gradients(ln, probe([](auto& t, auto& st) {
      return nn::layer_norm(t.param(st, "x"), t.param(st, "g"), t.param(st, "b"));
    }, 5, 6, 4), 4);
  }
  SUBCASE("slice, concat, gather, mean_rows") {
    require_gradients(s, [](Tape<double>& t, Store& st) {
      const auto a = t.param(st, "a");
      const auto c = t.param(st, "c");
      const std::vector<Var<double>> parts = {nn::slice_rows(a, 1, 2), c};
      const auto cat = nn::concat_rows<double>(parts);
      const std::vector<int> ids = {4, 0, 0, 2};
      const auto g = nn::gather_rows(cat, ids);
      return nn::squared_norm(nn::add_row(g, nn::mean_rows(cat)));
    }, 5);
  }
  SUBCASE("weighted_sum") {
    require_gradients(s, [](Tape<double>& t, Store& st) {
      const std::vector<Var<double>> terms = {nn::squared_norm(t.param(st, "a")),
                                              nn::sum(t.param(st, "b")),
                                              nn::squared_norm(t.param(st, "bias"))};
      const std::vector<double> w = {0.25, -1.5, 3.0};
      return nn::weighted_sum<double>(terms, w);
    }, 6);
  }
}

TEST_CASE("attention ops match finite differences") {
  SUBCASE("causal attention, two heads") {
    Store s = random_store(10, {{"q", 5, 4}, {"k", 5, 4}, {"v", 5, 4}});
    require_gradients(s, probe([](auto& t, auto& st) {
      return nn::causal_attention(t.param(st, "q"), t.param(st, "k"), t.param(st, "v"), 2);
    }, 5, 4, 5), 7);
  }
  SUBCASE("window query attention with a partial last window") {
    Store s = random_store(11, {{"queries", 2, 4}, {"keys", 7, 4}, {"values", 7, 4}});
    // 7 frames, window 3 -> windows of 3, 3, 1 frames, two queries each.
    require_gradients(s, probe([](auto& t, auto& st) {
      return nn::window_query_attention(t.param(st, "queries"), t.param(st, "keys"),
                                        t.param(st, "values"), 3, 2);
    }, 6, 4, 6), 8);
  }
}

TEST_CASE("loss ops match finite differences") {
  SUBCASE("cross entropy over selected rows") {
    Store s = random_store(12, {{"logits", 4, 6}});
    require_gradients(s, [](Tape<double>& t, Store& st) {
      const std::vector<int> rows = {0, 2, 3};
      const std::vector<int> labels = {5, 1, 1};
      return nn::cross_entropy(t.param(st, "logits"), rows, labels);
    }, 9, 24);
  }
  SUBCASE("wasserstein with the exact plan held fixed") {
    Store s = random_store(13, {{"src", 3, 2}});
    std::mt19937_64 rng(14);
    const MatrixXd target = testing::random_matrix(rng, 4, 2);
    ot::SolverConfig cfg;
    cfg.method = ot::Method::kExact;
    require_gradients(s, [target, cfg](Tape<double>& t, Store& st) {
      return nn::wasserstein(t.param(st, "src"), t.constant(target), cfg);
    }, 10, 6);
  }
  SUBCASE("npair loss") {
    Store s = random_store(15, {{"anchors", 3, 4}, {"positives", 3, 4}});
    require_gradients(s, [](Tape<double>& t, Store& st) {
      return nn::npair_loss(t.param(st, "anchors"), t.param(st, "positives"), 5.0);
    }, 11, 24);
  }
}

TEST_CASE("wasserstein op gives no gradient to its target") {
  Store s = random_store(16, {{"src", 3, 2}, {"tgt", 4, 2}});
  Tape<double> tape;
  tape.backward(nn::wasserstein(tape.param(s, "src"), tape.param(s, "tgt"), {}));
  CHECK_FALSE(s.grad("src").isZero(0.0));
  CHECK(s.grad("tgt").isZero(0.0));
}

TEST_CASE("cross entropy hand values") {
  Tape<double> tape;
  const std::vector<int> rows = {0};
  const std::vector<int> labels = {2};
  const auto uniform = tape.constant(MatrixXd::Zero(1, 7));
  CHECK(nn::cross_entropy(uniform, rows, labels).value()(0, 0) ==
        doctest::Approx(std::log(7.0)));
}

TEST_CASE("learning rate schedule") {
  const nn::ScheduleConfig cfg;  // 1e-6 -> 3e-5 over 9000 steps, cosine to 1e-5
  CHECK(nn::learning_rate(cfg, 0) == doctest::Approx(1e-6));
  CHECK(nn::learning_rate(cfg, cfg.warmup_steps) == doctest::Approx(3e-5));
  CHECK(nn::learning_rate(cfg, cfg.warmup_steps / 2) ==
        doctest::Approx(0.5 * (1e-6 + 3e-5)));
  CHECK(nn::learning_rate(cfg, cfg.total_steps) == doctest::Approx(1e-5));
  CHECK(nn::learning_rate(cfg, cfg.total_steps * 2) == doctest::Approx(1e-5));
  const auto mid = (cfg.warmup_steps + cfg.total_steps) / 2;
  CHECK(nn::learning_rate(cfg, mid) == doctest::Approx(0.5 * (3e-5 + 1e-5)));
  double prev = nn::learning_rate(cfg, cfg.warmup_steps);
  for (std::int64_t step = cfg.warmup_steps; step <= cfg.total_steps; step += 997) {
    const double lr = nn::learning_rate(cfg, step);
    CHECK(lr <= prev + 1e-18);
    prev = lr;
  }
}

TEST_CASE("zero gradients and zero weight decay leave parameters unchanged") {
  auto store = random_store(17, {{"w", 3, 3}, {"b", 1, 3}}).cast<float>();
  const auto before = store.cast<float>();
  nn::OptimizerState<float> state;
  nn::AdamWConfig adam;
  adam.weight_decay = 0.0;
  store.zero_grad();
  nn::optimizer_step(store, state, adam, nn::ScheduleConfig{});
  CHECK(state.step == 1);
  CHECK(state.first_moment.size() == store.size());
  CHECK(state.second_moment.at(0).rows() == 3);
  for (std::size_t i = 0; i < store.size(); ++i) {
    CHECK(store.at(i).value == before.at(i).value);
  }
}

TEST_CASE("weight decay shrinks matrices but not row vectors") {
  auto store = random_store(18, {{"w", 3, 3}, {"b", 1, 3}}).cast<float>();
  const auto before = store.cast<float>();
  nn::OptimizerState<float> state;
  nn::ScheduleConfig flat;
  flat.warmup_start = flat.peak = flat.floor = 0.1;
  flat.warmup_steps = 0;
  store.zero_grad();
  nn::optimizer_step(store, state, nn::AdamWConfig{}, flat);
  CHECK(store.value("w").isApprox(before.value("w") * (1.0f - 0.1f * 0.05f)));
  CHECK(store.value("b") == before.value("b"));
}

TEST_CASE("optimizer rejects non-finite gradients") {
  auto store = random_store(19, {{"w", 2, 2}}).cast<float>();
  nn::OptimizerState<float> state;
  store.zero_grad();
  store.grad("w")(0, 0) = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(nn::optimizer_step(store, state, {}, {}), nn::NumericsError);
}

TEST_CASE("gradient clipping bounds the first update") {
  auto store = random_store(20, {{"w", 2, 2}}).cast<float>();
  nn::OptimizerState<float> state;
  store.zero_grad();
  store.grad("w").setConstant(1e6f);
  nn::AdamWConfig adam;
  adam.weight_decay = 0.0;
  const auto before = store.cast<float>();
  nn::ScheduleConfig flat;
  flat.warmup_start = flat.peak = flat.floor = 1e-2;
  flat.warmup_steps = 0;
  nn::optimizer_step(store, state, adam, flat);
  // Adam's first step moves each coordinate by about lr regardless of scale.
  CHECK(((store.value("w") - before.value("w")).array().abs() <= 1.01e-2f).all());
  CHECK(store.all_finite());
}

TEST_CASE("early stopping trace: best at validation 3, stop after validation 7") {
  nn::EarlyStopping stop(4);
  const std::vector<double> acc = {0.1, 0.2, 0.5, 0.4, 0.5, 0.3, 0.45, 0.9};
  std::vector<bool> decisions;
  for (double a : acc) {
    decisions.push_back(stop.update(a));
    if (decisions.back()) break;
  }
  REQUIRE(decisions.size() == 7);
  for (std::size_t i = 0; i < 6; ++i) CHECK_FALSE(decisions[i]);
  CHECK(decisions[6]);
  CHECK(stop.best() == 0.5);
  CHECK(stop.best_index() == 2);  // zero-based: the third validation
  CHECK(stop.stale() == 4);
}

TEST_CASE("early stopping resets its counter on improvement") {
  nn::EarlyStopping stop(2);
  CHECK_FALSE(stop.update(0.3));
  CHECK_FALSE(stop.update(0.3));  // equal is not an improvement
  CHECK_FALSE(stop.update(0.4));
  CHECK(stop.improved_last());
  CHECK_FALSE(stop.update(0.1));
  CHECK(stop.update(0.2));
  CHECK_THROWS(nn::EarlyStopping(0));
}

TEST_CASE("checkpoint round trip preserves names, order, shapes and bits") {
  auto store = random_store(21, {{"z.last", 2, 3}, {"a.first", 1, 5}}).cast<float>();
  const auto path = temp_path("roundtrip.ckpt");
  nn::save_checkpoint(path, store, "{\"note\":\"x\"}");
  const auto ck = nn::load_checkpoint(path);
  CHECK(ck.metadata == "{\"note\":\"x\"}");
  REQUIRE(ck.params.size() == 2);
  CHECK(ck.params.at(0).name == "z.last");
  CHECK(ck.params.at(1).name == "a.first");
  CHECK(ck.params.value("z.last") == store.value("z.last"));
  CHECK(ck.params.value("a.first") == store.value("a.first"));
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint header layout") {
  nn::ParameterStore<float> store;
  store.add("w", Eigen::MatrixXf::Constant(2, 3, 1.0f));
  const auto path = temp_path("layout.ckpt");
  nn::save_checkpoint(path, store, "m");
  // magic 4 + version 4 + meta_len 4 + meta 1 + count 4
  // + name_len 4 + name 1 + rows 4 + cols 4 + 6 floats * 4
  CHECK(std::filesystem::file_size(path) == 4 + 4 + 4 + 1 + 4 + 4 + 1 + 4 + 4 + 24);
  std::ifstream in(path, std::ios::binary);
  char magic[4];
  in.read(magic, 4);
  CHECK(std::string(magic, 4) == "MBCK");
  std::filesystem::remove(path);
}

TEST_CASE("corrupt checkpoints are rejected") {
  auto store = random_store(22, {{"w", 3, 3}}).cast<float>();
  const auto path = temp_path("corrupt.ckpt");
  nn::save_checkpoint(path, store);
  const auto full = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, full - 5);
  CHECK_THROWS(nn::load_checkpoint(path));
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << "NOPE1234";
  }
  CHECK_THROWS(nn::load_checkpoint(path));
  std::filesystem::remove(path);
  CHECK_THROWS(nn::load_checkpoint(path));
}

}  // TEST_SUITE
