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

#include "modalign/ot.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

namespace modalign::ot {

namespace {

void check_cost(const Eigen::MatrixXd& cost) {
  if (cost.rows() == 0 || cost.cols() == 0) {
    throw OtError("cost matrix is empty");
  }
  if (!cost.allFinite()) throw OtError("cost matrix has non-finite entries");
  if ((cost.array() < 0.0).any()) throw OtError("cost matrix has negative entries");
}

// Minimum-cost perfect matching on a square matrix (shortest augmenting path
// with potentials). Returns col_of_row.
std::vector<int> hungarian(const Eigen::MatrixXd& a) {
  const int n = static_cast<int>(a.rows());
  const double inf = std::numeric_limits<double>::infinity();
  // 1-based arrays; index 0 is the virtual root.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = a(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> col_of_row(n, -1);
  for (int j = 1; j <= n; ++j) col_of_row[p[j] - 1] = j - 1;
  return col_of_row;
}

// log(sum(exp(x))) over a dense vector, stable for large magnitudes.
double log_sum_exp(const Eigen::Ref<const Eigen::VectorXd>& x) {
  const double top = x.maxCoeff();
  if (!std::isfinite(top)) return top;
  return top + std::log((x.array() - top).exp().sum());
}

// Altschuler-Weed-Rigollet rounding onto the transportation polytope.
void repair_marginals(Eigen::MatrixXd& plan) {
  const auto n = plan.rows();
  const auto m = plan.cols();
  const double a = 1.0 / static_cast<double>(n);
  const double b = 1.0 / static_cast<double>(m);

  Eigen::VectorXd rows = plan.rowwise().sum();
  for (Eigen::Index i = 0; i < n; ++i) {
    if (rows(i) > a) plan.row(i) *= a / rows(i);
  }
  Eigen::RowVectorXd cols = plan.colwise().sum();
  for (Eigen::Index j = 0; j < m; ++j) {
    if (cols(j) > b) plan.col(j) *= b / cols(j);
  }
  const Eigen::VectorXd err_r = a - plan.rowwise().sum().array();
  const Eigen::RowVectorXd err_c = b - plan.colwise().sum().array();
  const double mass = err_r.sum();
  if (mass > 0.0) plan.noalias() += err_r * err_c / mass;
  plan = plan.cwiseMax(0.0);
}

}  // namespace

double marginal_violation(const Eigen::MatrixXd& plan) {
  const double a = 1.0 / static_cast<double>(plan.rows());
  const double b = 1.0 / static_cast<double>(plan.cols());
  const double row_err = (plan.rowwise().sum().array() - a).abs().maxCoeff();
  const double col_err = (plan.colwise().sum().array() - b).abs().maxCoeff();
  return std::max(row_err, col_err);
}

OtSolution solve_exact_small(const Eigen::MatrixXd& cost) {
  check_cost(cost);
  const auto n = static_cast<std::size_t>(cost.rows());
  const auto m = static_cast<std::size_t>(cost.cols());
  if (n * m > kExactLimit) {
    throw OtError("instance " + std::to_string(n) + "x" + std::to_string(m) +
                  " exceeds exact solver limit of " +
                  std::to_string(kExactLimit) + " cells; use sinkhorn");
  }
  // With K = lcm(n, m), every row carries K/n units and every column K/m
  // units. Transportation polytopes with integer margins have integral
  // vertices, so an optimal plan is an assignment on the replicated problem.
  const std::size_t k = std::lcm(n, m);
  const std::size_t row_rep = k / n;
  const std::size_t col_rep = k / m;
  Eigen::MatrixXd expanded(k, k);
  for (std::size_t r = 0; r < k; ++r) {
    for (std::size_t c = 0; c < k; ++c) {
      expanded(r, c) = cost(r / row_rep, c / col_rep);
    }
  }
  const std::vector<int> match = hungarian(expanded);

  OtSolution sol;
  sol.plan = Eigen::MatrixXd::Zero(cost.rows(), cost.cols());
  const double unit = 1.0 / static_cast<double>(k);
  for (std::size_t r = 0; r < k; ++r) {
    sol.plan(r / row_rep, static_cast<std::size_t>(match[r]) / col_rep) += unit;
  }
  sol.distance = (sol.plan.array() * cost.array()).sum();
  sol.marginal_violation = marginal_violation(sol.plan);
  return sol;
}

OtSolution sinkhorn(const Eigen::MatrixXd& cost, double epsilon, int max_iters,
                    double tol) {
  check_cost(cost);
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) {
    throw OtError("sinkhorn epsilon must be positive");
  }
  if (!(tol > 0.0)) throw OtError("sinkhorn tol must be positive");
  if (max_iters < 1) throw OtError("sinkhorn max_iters must be >= 1");

  const auto n = cost.rows();
  const auto m = cost.cols();
  const double log_a = -std::log(static_cast<double>(n));
  const double log_b = -std::log(static_cast<double>(m));

  Eigen::VectorXd f = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd g = Eigen::VectorXd::Zero(m);
  Eigen::VectorXd scratch_n(n), scratch_m(m);

  // One f then g refresh. Columns are exact after every g update, so only row
  // marginals drift; the returned error is that of the plan before the
  // refresh, read off the f update as row_mass_i = a * exp((f_i - f'_i) / eps).
  const double a = std::exp(log_a);
  auto step = [&](double eps) {
    double worst = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      scratch_m = (g - cost.row(i).transpose()) / eps;
      const double fresh = eps * (log_a - log_sum_exp(scratch_m));
      worst = std::max(worst, a * std::abs(std::expm1((f(i) - fresh) / eps)));
      f(i) = fresh;
    }
    for (Eigen::Index j = 0; j < m; ++j) {
      scratch_n = (f - cost.col(j)) / eps;
      g(j) = eps * (log_b - log_sum_exp(scratch_n));
    }
    return worst;
  };

  // Anneal from the cost scale down to the target epsilon; warm-started
  // potentials keep the late, sharply regularized stages short.
  const double start = std::max(cost.maxCoeff(), epsilon);
  std::vector<double> stages;
  for (double eps = start; eps > epsilon; eps *= 0.5) stages.push_back(eps);
  stages.push_back(epsilon);

  OtSolution sol;
  int iters = 0;
  bool converged = false;
  double eps = stages.front();
  for (std::size_t s = 0; s < stages.size() && iters < max_iters; ++s) {
    eps = stages[s];
    const bool last = s + 1 == stages.size();
    const double stage_tol = last ? tol : std::max(tol, 1e-3 / n);
    const int stage_cap = last ? max_iters : 10;
    // The first step at a new epsilon only measures a stale plan.
    for (int k = 0; k < stage_cap && iters < max_iters; ++k) {
      const double err = step(eps);
      ++iters;
      if (k > 0 && err <= stage_tol) {
        if (last) converged = true;
        break;
      }
    }
  }

  Eigen::MatrixXd plan(n, m);
  for (Eigen::Index j = 0; j < m; ++j) {
    for (Eigen::Index i = 0; i < n; ++i) {
      plan(i, j) = std::exp((f(i) + g(j) - cost(i, j)) / eps);
    }
  }
  repair_marginals(plan);

  sol.plan = std::move(plan);
  sol.distance = (sol.plan.array() * cost.array()).sum();
  sol.iterations = iters;
  sol.marginal_violation = marginal_violation(sol.plan);
  sol.converged = converged;
  return sol;
}

OtSolution solve(const Eigen::MatrixXd& cost, const SolverConfig& cfg) {
  check_cost(cost);
  const auto cells = static_cast<std::size_t>(cost.size());
  const bool exact = cfg.method == Method::kExact ||
                     (cfg.method == Method::kAuto && cells <= kExactLimit);
  if (exact) return solve_exact_small(cost);

  double eps = 0.0;
  if (cfg.epsilon) {
    eps = *cfg.epsilon;
    if (!(eps > 0.0)) throw OtError("sinkhorn epsilon must be positive");
  } else {
    if (!(cfg.epsilon_scale > 0.0)) {
      throw OtError("sinkhorn epsilon_scale must be positive");
    }
    const double mean = cost.mean();
    if (mean == 0.0) {
      // Every plan is optimal at zero cost; return the independent coupling.
      OtSolution sol;
      sol.plan = Eigen::MatrixXd::Constant(
          cost.rows(), cost.cols(),
          1.0 / static_cast<double>(cost.rows() * cost.cols()));
      sol.marginal_violation = marginal_violation(sol.plan);
      return sol;
    }
    eps = cfg.epsilon_scale * mean;
  }
  return sinkhorn(cost, eps, cfg.max_iters, cfg.tol);
}

}  // namespace modalign::ot
